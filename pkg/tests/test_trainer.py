import shutil

import numpy as np
import pytest

from tdcedn import data as D
from tdcedn.network import TDCEDN, load_checkpoint
from tdcedn.tensor import Tensor
from tdcedn.trainer import (
    LOG_HEADER, OptimizerState, TrainConfig, TrainingDiverged, load_optimizer_state, poly_lr,
    read_loss_log, save_optimizer_state, sgd_step, train,
)

from conftest import SMALL_WIDTHS


def small_cfg(**kw):
    base = dict(base_lr=1e-3, max_iter=10, input_size=32, consensus="all", seed=2)
    base.update(kw)
    return TrainConfig(**base)


def two_samples():
    return [D.synthetic_sample("disk", 40, noise=0.02), D.synthetic_sample("square", 40, noise=0.02, seed=1)]


def test_poly_lr_examples():
    cfg = TrainConfig()
    assert poly_lr(0, cfg) == 1e-6
    assert poly_lr(cfg.max_iter, cfg) == 0
    assert abs(poly_lr(cfg.max_iter // 2, cfg) - 5.7435e-7) < 1e-11
    assert abs(poly_lr(cfg.max_iter // 2, cfg) - 1e-6 * 0.5**0.8) < 1e-20
    with pytest.raises(ValueError):
        poly_lr(cfg.max_iter + 1, cfg)
    lrs = [poly_lr(k, cfg) for k in range(0, cfg.max_iter + 1, 500)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def _params(rng):
    return {
        "a.weight": Tensor(rng.standard_normal((2, 3)), rng.standard_normal((2, 3))),
        "a.bias": Tensor(rng.standard_normal(2), rng.standard_normal(2)),
    }


def test_sgd_zero_lr_decays_velocity(rng):
    params = _params(rng)
    before = {k: t.data.copy() for k, t in params.items()}
    state = OptimizerState({k: np.ones_like(t.data) for k, t in params.items()})
    cfg = TrainConfig()
    sgd_step(params, state, cfg, lr=0.0)
    for k, t in params.items():
        np.testing.assert_array_equal(t.data, before[k] + 0.9)
        np.testing.assert_array_equal(state.velocity[k], 0.9)
    assert state.iteration == 1


def test_sgd_plain_gradient_descent(rng):
    params = _params(rng)
    before = {k: t.data.copy() for k, t in params.items()}
    cfg = TrainConfig(momentum=0.0, weight_decay=0.0)
    sgd_step(params, OptimizerState(), cfg, lr=0.1)
    for k, t in params.items():
        np.testing.assert_allclose(t.data, before[k] - 0.1 * t.grad, rtol=1e-15)


def test_sgd_weight_decay_skips_biases(rng):
    params = _params(rng)
    for t in params.values():
        t.grad = np.zeros_like(t.data)
    before = {k: t.data.copy() for k, t in params.items()}
    sgd_step(params, OptimizerState(), TrainConfig(momentum=0.0, weight_decay=0.5), lr=0.1)
    np.testing.assert_allclose(params["a.weight"].data, before["a.weight"] * 0.95)
    np.testing.assert_array_equal(params["a.bias"].data, before["a.bias"])
    sgd_step(params, OptimizerState(), TrainConfig(momentum=0.0, weight_decay=0.5, decay_biases=True), lr=0.1)
    np.testing.assert_allclose(params["a.bias"].data, before["a.bias"] * 0.95)


def test_sgd_missing_gradient_names_parameter(rng):
    params = _params(rng)
    with pytest.raises(KeyError, match="a.bias"):
        sgd_step(params, OptimizerState(), TrainConfig(), grads={"a.weight": np.zeros((2, 3))}, lr=0.1)


def test_optimizer_state_roundtrip(tmp_path, rng):
    state = OptimizerState({"x.weight": rng.standard_normal((3, 3)).astype(np.float32)}, 1234)
    save_optimizer_state(state, tmp_path / "s.opt")
    back = load_optimizer_state(tmp_path / "s.opt")
    assert back.iteration == 1234
    np.testing.assert_array_equal(back.velocity["x.weight"], state.velocity["x.weight"])


def test_config_file(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text("# desk scale\nbase_lr = 1e-3\nmax_iter=50\nrotations = 0, 180\nhorizontal_flip = false\n")
    cfg = TrainConfig.from_file(p, seed=4)
    assert (cfg.base_lr, cfg.max_iter, cfg.rotations, cfg.horizontal_flip, cfg.seed) == (1e-3, 50, (0, 180), False, 4)
    p.write_text("learning_rate = 1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_file(p)
    p.write_text("max_iter\n")
    with pytest.raises(ValueError):
        TrainConfig.from_file(p)


@pytest.mark.parametrize("bad", [dict(base_lr=0), dict(momentum=1.0), dict(batch=2), dict(consensus="x"), dict(alpha=(1,) * 4)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_training_log_is_bitwise_reproducible(tmp_path):
    runs = []
    for name in ("a", "b"):
        graph = TDCEDN(SMALL_WIDTHS, seed=2)
        res = train(graph, two_samples(), small_cfg(), out_dir=tmp_path / name)
        runs.append(res)
    assert runs[0].log == runs[1].log
    assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
    rows = read_loss_log(tmp_path / "a" / "loss_log.csv")
    assert [r[0] for r in rows] == list(range(1, 11))
    assert rows == [tuple(r) for r in runs[0].log]
    for it, lr, side, pred, total in rows:
        assert total == side + pred
    assert (tmp_path / "a" / "loss_log.csv").read_text().splitlines()[0] == ",".join(LOG_HEADER)
    assert (tmp_path / "a" / "final.ckpt").exists()


def test_resume_reproduces_log_tail(tmp_path):
    cfg = small_cfg(max_iter=8, snapshot_every=4)
    full = train(TDCEDN(SMALL_WIDTHS, seed=2), two_samples(), cfg, out_dir=tmp_path / "full")
    resumed_dir = tmp_path / "resumed"
    resumed_dir.mkdir()
    shutil.copy(tmp_path / "full" / "iter_000004.ckpt", resumed_dir)
    shutil.copy(tmp_path / "full" / "iter_000004.ckpt.opt", resumed_dir)
    part = train(
        TDCEDN(SMALL_WIDTHS, seed=99), two_samples(), cfg,
        out_dir=resumed_dir, resume_from=resumed_dir / "iter_000004.ckpt",
    )
    assert part.log == full.log[4:]
    a = load_checkpoint(tmp_path / "full" / "final.ckpt")
    b = load_checkpoint(resumed_dir / "final.ckpt")
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_nan_gradient_aborts_with_snapshot(tmp_path):
    graph = TDCEDN(SMALL_WIDTHS, seed=2)
    seen = {}

    def inject(k, g):
        if k == 3:
            seen["before"] = g.params["dec2_1.conv.weight"].data.copy()
            g.params["dec2_1.conv.weight"].grad[0, 0, 0, 0] = np.nan

    with pytest.raises(TrainingDiverged) as info:
        train(graph, two_samples(), small_cfg(), out_dir=tmp_path, on_step=inject)
    assert info.value.iteration == 4
    assert "dec2_1.conv.weight" in str(info.value)
    snap = info.value.snapshot
    assert snap.exists() and snap.name == "last_good.ckpt"
    restored = load_checkpoint(snap)
    np.testing.assert_array_equal(restored.params["dec2_1.conv.weight"].data, seen["before"])
    assert load_optimizer_state(str(snap) + ".opt").iteration == 3
    assert len(read_loss_log(tmp_path / "loss_log.csv")) == 3


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(TDCEDN(SMALL_WIDTHS), [], small_cfg())


def test_until_then_resume_equals_uninterrupted(tmp_path):
    cfg = small_cfg(max_iter=8)
    full = train(TDCEDN(SMALL_WIDTHS, seed=2), two_samples(), cfg)
    first = train(TDCEDN(SMALL_WIDTHS, seed=2), two_samples(), cfg, out_dir=tmp_path, until=5)
    assert first.state.iteration == 5 and first.log == full.log[:5]
    rest = train(TDCEDN(SMALL_WIDTHS, seed=2), two_samples(), cfg, out_dir=tmp_path,
                 resume_from=tmp_path / "final.ckpt")
    assert rest.log == full.log[5:]
