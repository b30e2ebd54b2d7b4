import dataclasses
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aet.config import ProbeConfig, RunConfig, dump_config, from_flat, load_config, parse_text, to_flat
from aet.data import SyntheticConfig, gen_synthetic, split
from aet.errors import ArchMismatch, ConfigError, MalformedCsv, NonFiniteLoss
from aet.model import Encoder, NinConfig, ProbeSpec
from aet.nn.optim import SgdConfig
from aet.traineval import (
    EncoderCheckpoint,
    MetricsLog,
    MetricsRow,
    export_metrics,
    fit_feature_probe,
    import_metrics,
    knn_eval,
    knn_from_features,
    knn_sweep,
    rank_correlation,
    state_digest,
    train_aet,
    train_probe,
)
from aet.xform import XformConfig

TINY_NIN = NinConfig(num_blocks=2, convs_per_block=1, widths=(6, 6), kernels=(3, 3), downsample_after=(1,),
                     image_size=16)


def tiny_cfg(**kw):
    base = dict(
        seed=0, epochs=2, batch_size=8, eval_every=1, wall_clock=False,
        synthetic=SyntheticConfig(n_per_class=6, image_size=16, supersample=2, seed=1),
        nin=TINY_NIN,
        sgd=SgdConfig(base_lr=0.05, drop_epochs=(1,)),
        probe=ProbeConfig(kind="fc_1", epochs=2, batch_size=8),
        knn_k=3,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    cfg = tiny_cfg()
    return split(gen_synthetic(cfg.synthetic), cfg.data.test_fraction, cfg.data.split_seed)


# --- metrics CSV ------------------------------------------------------------

def test_single_row_exports_header_plus_one_line(tmp_path):
    log = MetricsLog()
    log.append(MetricsRow(1, 0.5, 0.1))
    path = export_metrics(log, tmp_path / "m.csv")
    lines = open(path).read().splitlines()
    assert lines == ["epoch,aet_loss,lr,probe_error,knn_error,wall_seconds", "1,0.5,0.10000000000000001,,,"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e6, allow_nan=False), st.floats(1e-9, 1.0),
                          st.one_of(st.none(), st.floats(0, 1))), min_size=1, max_size=6))
def test_metrics_round_trip_is_exact(tmp_path_factory, rows):
    log = MetricsLog()
    for i, (loss, lr, err) in enumerate(rows, 1):
        log.append(MetricsRow(i, loss, lr, err, err, None))
    path = export_metrics(log, tmp_path_factory.mktemp("m") / "m.csv")
    assert import_metrics(path).rows == log.rows


def test_metrics_log_rejects_bad_rows():
    log = MetricsLog()
    log.append(MetricsRow(2, 1.0, 0.1))
    with pytest.raises(ValueError):
        log.append(MetricsRow(2, 1.0, 0.1))
    with pytest.raises(ValueError):
        log.append(MetricsRow(3, float("nan"), 0.1))


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("epoch,loss\n1,2\n", 1),
    ("epoch,aet_loss,lr,probe_error,knn_error,wall_seconds\n", 1),
    ("epoch,aet_loss,lr,probe_error,knn_error,wall_seconds\n1,0.5,0.1,,,\n2,0.4,0.1,,\n", 3),
    ("epoch,aet_loss,lr,probe_error,knn_error,wall_seconds\n1,abc,0.1,,,\n", 2),
])
def test_malformed_csv_reports_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(MalformedCsv) as err:
        import_metrics(path)
    assert err.value.line == line


# --- KNN --------------------------------------------------------------------

def brute_knn(train, ytr, test, yte, k):
    wrong = 0
    for q, truth in zip(test, yte):
        d = np.linalg.norm(train - q, axis=1)
        order = sorted(range(len(d)), key=lambda i: (d[i], ytr[i]))[:k]
        votes = {}
        for i in order:
            c, s = votes.get(ytr[i], (0, 0.0))
            votes[ytr[i]] = (c + 1, s + d[i])
        pred = min(votes, key=lambda c: (-votes[c][0], votes[c][1], c))
        wrong += pred != truth
    return wrong / len(yte)


def test_knn_k1_on_duplicated_training_set_is_perfect():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 5))
    y = rng.integers(0, 3, size=20)
    assert knn_from_features(x, y, x, y, [1]) == [(1, 0.0)]


def test_knn_hand_computed_six_points():
    train = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
    ytr = np.array([0, 0, 1, 1, 1, 0])
    test = np.array([[0.4], [11.2], [1.6]])
    yte = np.array([0, 1, 1])
    # q=0.4: K=1 -> 0; K=3 -> {0,0,1} -> 0
    # q=11.2: K=1 -> 1 (11); K=3 -> {1,1,0} -> 1
    # q=1.6: K=1 -> 1 (2.0); K=3 -> {1,0,0} -> 0 wrong
    assert knn_from_features(train, ytr, test, yte, [1, 3]) == [(1, 0.0), (3, 1 / 3)]


def test_knn_tie_breaks_on_summed_distance_then_class():
    train = np.array([[1.0], [-1.5], [3.0], [-3.0]])
    ytr = np.array([1, 0, 1, 0])
    # K=2: one vote each; class 1 is closer in total
    assert knn_from_features(train, ytr, np.zeros((1, 1)), [1], [2])[0][1] == 0.0
    # K=4: two votes each, equal summed distance 4.5 -> smaller class 0
    train2 = np.array([[1.5], [-1.5], [3.0], [-3.0]])
    assert knn_from_features(train2, ytr, np.zeros((1, 1)), [0], [4])[0][1] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_knn_matches_brute_force_and_is_order_independent(seed):
    rng = np.random.default_rng(seed)
    train = rng.integers(-3, 4, size=(25, 2)).astype(float)  # integer grid forces exact ties
    ytr = rng.integers(0, 3, size=25)
    test = rng.integers(-3, 4, size=(8, 2)).astype(float)
    yte = rng.integers(0, 3, size=8)
    ks = [1, 2, 5, 9]
    got = knn_from_features(train, ytr, test, yte, ks, chunk=3)
    assert got == [(k, brute_knn(train, ytr, test, yte, k)) for k in ks]
    perm = rng.permutation(25)
    assert knn_from_features(train[perm], ytr[perm], test, yte, ks) == got


def test_knn_sweep_matches_individual_runs_and_accepts_duplicates(tiny_data):
    train, test = tiny_data
    enc = Encoder(TINY_NIN, np.random.default_rng(0)).eval()
    sweep = knn_sweep(enc, train, test, [1, 3, 3, 5])
    assert [k for k, _ in sweep] == [1, 3, 3, 5]
    assert sweep[1] == sweep[2]
    for k, err in sweep:
        assert knn_eval(enc, train, test, k) == err


def test_knn_rejects_bad_k():
    x = np.zeros((3, 2))
    with pytest.raises(ValueError):
        knn_from_features(x, [0, 1, 0], x, [0, 1, 0], [4])
    with pytest.raises(ValueError):
        knn_from_features(x, [0, 1, 0], x, [0, 1, 0], [0])


# --- probes -----------------------------------------------------------------

def test_probe_on_one_hot_features_reaches_zero_error():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, size=200)
    feats = np.eye(4)[y] * 3.0
    cfg = ProbeConfig(kind="fc_1", epochs=20, batch_size=32)
    _, err = fit_feature_probe(feats, y, feats[:50], y[:50], ProbeSpec("fc_1", num_classes=4), cfg)
    assert err == 0.0


def test_probe_leaves_checkpoint_encoder_unchanged(tiny_data, tmp_path):
    train, test = tiny_data
    cfg = tiny_cfg(epochs=1)
    ckpt, _ = train_aet(cfg, data=tiny_data)
    before = state_digest(ckpt.encoder())
    for kind in ("fc_1", "conv"):
        _, err = train_probe(ckpt, ProbeSpec(kind, hidden=8, num_classes=4), train, test)
        assert 0.0 <= err <= 1.0
    assert state_digest(ckpt.encoder()) == before
    path = ckpt.save(tmp_path / "c.ckpt")
    assert state_digest(EncoderCheckpoint.load(path).encoder()) == before


def test_probe_rejects_incompatible_encoder(tiny_data):
    train, test = tiny_data
    enc = Encoder(dataclasses.replace(TINY_NIN, in_channels=1), np.random.default_rng(0))
    cfg = tiny_cfg()
    ckpt = EncoderCheckpoint(dataclasses.replace(cfg, nin=enc.cfg), 0,
                             {f"encoder/{k}": v for k, v in enc.state_arrays().items()}, {}, [])
    with pytest.raises(ArchMismatch):
        train_probe(ckpt, ProbeSpec("fc_1", num_classes=4), train, test)


# --- AET training -----------------------------------------------------------

def test_one_epoch_run_writes_artifacts(tiny_data, tmp_path):
    cfg = tiny_cfg(epochs=1)
    ckpt, log = train_aet(cfg, data=tiny_data, out_dir=str(tmp_path))
    assert len(log) == 1 and log.rows[0].epoch == 1
    assert log.rows[0].probe_error is not None and log.rows[0].knn_error is not None
    assert sorted(os.listdir(tmp_path)) == ["ckpt_epoch0001.ckpt", "final.ckpt", "metrics.csv"]
    assert import_metrics(tmp_path / "metrics.csv").rows == log.rows
    back = EncoderCheckpoint.load(tmp_path / "final.ckpt")
    assert back.epoch == 1 and to_flat(back.config) == to_flat(cfg)


def test_identity_sampler_drives_prediction_to_identity(tiny_data):
    cfg = tiny_cfg(epochs=25, eval_every=25, xform=XformConfig.identity_only(),
                   sgd=SgdConfig(base_lr=0.05, drop_epochs=()))
    ckpt, log = train_aet(cfg, data=tiny_data)
    assert log.rows[-1].aet_loss < 0.05 * log.rows[0].aet_loss
    assert log.rows[-1].aet_loss < 1e-2


def test_training_is_reproducible(tiny_data):
    cfg = tiny_cfg(epochs=2)
    a_ckpt, a_log = train_aet(cfg, data=tiny_data)
    b_ckpt, b_log = train_aet(cfg, data=tiny_data)
    assert a_log.rows == b_log.rows
    assert a_ckpt.arrays.keys() == b_ckpt.arrays.keys()
    assert all(np.array_equal(a_ckpt.arrays[k], b_ckpt.arrays[k]) for k in a_ckpt.arrays)


def test_resume_matches_straight_run(tiny_data, tmp_path):
    cfg = tiny_cfg(epochs=4, eval_every=2)
    straight, s_log = train_aet(cfg, data=tiny_data)
    half, _ = train_aet(dataclasses.replace(cfg, epochs=2), data=tiny_data, out_dir=str(tmp_path))
    resumed_from = EncoderCheckpoint.load(tmp_path / "final.ckpt")
    resumed, r_log = train_aet(cfg, resume=resumed_from, data=tiny_data)
    assert r_log.rows == s_log.rows
    assert all(np.array_equal(straight.arrays[k], resumed.arrays[k]) for k in straight.arrays)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_learning_rate_raises_nonfinite(tiny_data):
    cfg = tiny_cfg(epochs=3, sgd=SgdConfig(base_lr=1e12, drop_epochs=()))
    with pytest.raises(NonFiniteLoss) as err:
        train_aet(cfg, data=tiny_data)
    assert err.value.epoch >= 1


def test_train_rejects_shallow_encoder(tiny_data):
    nin = NinConfig(num_blocks=2, convs_per_block=1, widths=(6, 6), kernels=(3, 3), downsample_after=(1,),
                    image_size=16, in_channels=1)
    with pytest.raises(ArchMismatch):
        train_aet(tiny_cfg(nin=nin), data=tiny_data)


def test_rank_correlation():
    log = MetricsLog()
    for i, (loss, err) in enumerate([(3.0, 0.5), (2.0, 0.4), (1.0, 0.2), (0.5, 0.25)], 1):
        log.append(MetricsRow(i, loss, 0.1, err, err))
    assert rank_correlation(log) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        rank_correlation(MetricsLog(log.rows[:2]))


# --- configuration ----------------------------------------------------------

def test_config_text_round_trip():
    cfg = tiny_cfg()
    again = from_flat(parse_text(dump_config(cfg)))
    assert to_flat(again) == to_flat(cfg)
    assert again == cfg


def test_config_overrides_take_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nepochs = 7\nsgd.base_lr = 0.2\nnin.widths = 8, 8, 8, 8\n")
    cfg = load_config(path, {"epochs": "9"})
    assert cfg.epochs == 9 and cfg.sgd.base_lr == 0.2 and cfg.nin.widths == (8, 8, 8, 8)


@pytest.mark.parametrize("text", ["nope = 1", "sgd.nope = 1", "epochs = many", "epochs", "xform.family = warp"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_cifar_path_is_config_error():
    cfg = from_flat({"data.name": "cifar10", "data.path": "/does/not/exist"})
    with pytest.raises(ConfigError):
        cfg.check_paths()


def test_out_dir_env(monkeypatch):
    monkeypatch.setenv("AET_OUT_DIR", "/tmp/xyz")
    assert RunConfig().resolved_out_dir() == os.path.join("/tmp/xyz", "out")
    assert RunConfig(out_dir="here").resolved_out_dir() == "here"
