"""Self-check suite run by ``m3net verify``.

Each group returns ``(passed, detail)``. The checks are sized to finish in
well under a minute on one core.
"""

from __future__ import annotations

import io
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernel as K
from .data import SplitSpec, batches, make_windows, synthetic_series
from .layers import (M3LayerParams, MLPParams, MoEParams, SpatialMLPParams, channel_moe,
                     m3_forward, single_expert, spatial_mix)
from .model import M3Net, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import compute_metrics


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _leaf(arr):
    return K.Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _numeric_grads(fn, leaves, eps=1e-6):
    out = []
    for t in leaves:
        g = np.zeros_like(t.data)
        flat, gf = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            gf[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def weighted(t):
    """Random linear functional of ``t``, so every output element matters."""
    w = np.random.default_rng(t.data.size).standard_normal(t.shape)
    return K.sum_all(K.mul(t, K.Tensor(w)))


def _op_cases(rng):
    """(name, builder) pairs; each builder returns (leaves, scalar objective)."""
    cases = []
    a, b = _leaf(_rand(rng, 3, 4)), _leaf(_rand(rng, 4, 5))
    cases.append(("matmul", [a, b], lambda: weighted(K.matmul(a, b))))
    gt, h = _leaf(_rand(rng, 4, 2)), _leaf(_rand(rng, 3, 4, 5))
    cases.append(("matmul-batched", [gt, h], lambda: weighted(K.matmul(K.transpose(gt), h))))
    s = _leaf(_rand(rng, 3, 4) * 3)
    cases.append(("softmax_rows", [s], lambda: weighted(K.softmax_rows(s))))
    col, full = _leaf(_rand(rng, 3, 1)), _leaf(_rand(rng, 3, 4))
    cases.append(("mul-column", [col, full], lambda: weighted(K.mul(col, full))))
    r = _leaf(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    cases.append(("relu", [r], lambda: weighted(K.relu(r))))
    p1, p2 = _leaf(_rand(rng, 3, 2)), _leaf(_rand(rng, 3, 3))
    cases.append(("concat", [p1, p2], lambda: weighted(K.concat_last_dim([p1, p2]))))
    table = _leaf(_rand(rng, 6, 4))
    idx = np.array([1, 4, 1])
    cases.append(("take_rows", [table], lambda: weighted(K.take_rows(table, idx))))
    e = _leaf(_rand(rng, 4, 5))
    cases.append(("expand", [e], lambda: weighted(K.expand(e, 0, 3))))
    x, bias = _leaf(_rand(rng, 3, 4)), _leaf(_rand(rng, 4))
    cases.append(("add_bias", [x, bias], lambda: weighted(K.add_bias(x, bias))))
    ln = _leaf(_rand(rng, 3, 4))
    cases.append(("layer_norm", [ln], lambda: weighted(K.layer_norm(ln))))
    pred = _leaf(_rand(rng, 3, 4))
    target = _rand(rng, 3, 4)
    target[0, 0] = 0.0
    cases.append(("masked_mae", [pred], lambda: K.masked_mae(pred, target, target != 0)))
    return cases


def check_kernel_gradients(seeds=range(5), tol=1e-4) -> tuple[bool, str]:
    worst = {}
    for seed in seeds:
        for name, leaves, fn in _op_cases(np.random.default_rng(seed)):
            for t in leaves:
                t.grad = None
            fn().backward()
            analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
            numeric = _numeric_grads(fn, leaves)
            for a, n in zip(analytic, numeric):
                err = float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)))
                worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v > tol}
    if bad:
        return False, "gradient mismatch: " + ", ".join(f"{k} ({v:.2e})" for k, v in bad.items())
    return True, f"{len(worst)} ops, max rel err {max(worst.values()):.1e}"


def check_model_gradients(tol=1e-4) -> tuple[bool, str]:
    cfg = ModelConfig(N=5, L=4, F=3, D_F=2, D_S=2, D_d=2, D_w=2, T_d=6, g=2, K=2,
                      num_layers=1, seed=3, dtype="float64")
    model = M3Net(cfg)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 5, 1))
    tod, dow = np.array([1, 5]), np.array([0, 6])
    target = rng.standard_normal((2, 5, 3))
    report = K.grad_check(lambda s: K.masked_mae(model.forward(x, tod, dow), target),
                          model.store, eps=1e-6, tol=tol)
    if not report.passed:
        return False, "grad check failed: " + ", ".join(report.failures())
    return True, f"{len(report.max_rel_err)} parameters"


def _oracle_spatial(H, G, W1, b1, W2, b2):
    H_g = G.T @ H
    H_g_hat = np.maximum(H_g @ W1 + b1, 0) @ W2 + b2
    return H + G @ H_g_hat


def _oracle_moe(H_s, Wg, bg, experts):
    logits = H_s @ Wg + bg
    alpha = np.exp(logits - logits.max(axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    H_c = np.zeros_like(H_s)
    for k, (W1, b1, W2, b2) in enumerate(experts):
        H_c += alpha[:, k:k + 1] * (np.maximum(H_s @ W1 + b1, 0) @ W2 + b2)
    return H_s + H_c


def _mlp_arrays(rng, D):
    return _rand(rng, D, D), _rand(rng, D), _rand(rng, D, D), _rand(rng, D)


def _mlp_params(arrs):
    return MLPParams(*(K.Tensor(a) for a in arrs))


def check_layer_oracles(instances=20, tol=1e-6) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        N, g, D, Kx = 5, 2, 8, 4
        H, G = _rand(rng, N, D), _rand(rng, N, g)
        mlp = _mlp_arrays(rng, D)
        got = spatial_mix(K.Tensor(H), SpatialMLPParams(K.Tensor(G), _mlp_params(mlp))).data
        worst = max(worst, float(np.max(np.abs(got - _oracle_spatial(H, G, *mlp)))))
        Wg, bg = _rand(rng, D, Kx), _rand(rng, Kx)
        experts = [_mlp_arrays(rng, D) for _ in range(Kx)]
        p = MoEParams(K.Tensor(Wg), K.Tensor(bg), [_mlp_params(e) for e in experts])
        got = channel_moe(K.Tensor(H), p).data
        worst = max(worst, float(np.max(np.abs(got - _oracle_moe(H, Wg, bg, experts)))))
    ok = worst <= tol
    return ok, f"max abs deviation {worst:.1e} over {instances} instances"


def check_degenerate_cases() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    N, D = 6, 8
    H = _rand(rng, N, D)
    mlp = _mlp_params(_mlp_arrays(rng, D))
    zero_g = spatial_mix(K.Tensor(H), SpatialMLPParams(K.Tensor(np.zeros((N, 3))), mlp)).data
    if not np.array_equal(zero_g, H):
        return False, "G=0 did not leave H unchanged"
    expert = _mlp_params(_mlp_arrays(rng, D))
    single = MoEParams(K.Tensor(_rand(rng, D, 1)), K.Tensor(_rand(rng, 1)), [expert])
    layer = M3LayerParams(SpatialMLPParams(K.Tensor(_rand(rng, N, 3)), mlp), single)
    a = m3_forward(K.Tensor(H), layer, "no_spatial").data
    b = channel_moe(K.Tensor(H), single).data
    c = single_expert(K.Tensor(H), single).data
    if not (np.array_equal(a, b) and np.array_equal(b, c)):
        return False, "K=1 mixture differs from the single-expert variant"
    layer.spatial.G.data[:] = _rand(rng, N, 3)
    layer.spatial.mlp.W1.data[:] = 0
    if not np.array_equal(m3_forward(K.Tensor(H), layer, "no_spatial").data, a):
        return False, "no_spatial output moved when spatial parameters changed"
    return True, "G=0 identity, K=1 equivalence, no_spatial invariance"


def check_metric_oracles(tol=1e-6) -> tuple[bool, str]:
    r = compute_metrics(np.array([[12.0, 16.0]]).T[None], np.array([[10.0, 20.0]]).T[None],
                        horizons=())
    hand = r.avg
    if not (abs(hand.mae - 3.0) < 1e-12 and abs(hand.rmse - np.sqrt(10)) < 1e-12
            and abs(hand.mape - 20.0) < 1e-12):
        return False, f"hand case gave {hand}"
    rng = np.random.default_rng(5)
    pred = rng.uniform(0, 300, (4, 6, 12))
    target = rng.uniform(0, 300, (4, 6, 12))
    target[0, 0, :3] = 0.5
    got = compute_metrics(pred, target)
    for key, h in (("@3", 3), ("@6", 6), ("@12", 12), ("avg", None)):
        cols = range(12) if h is None else [h - 1]
        ae = se = ape = 0.0
        n = n_ape = 0
        for b in range(4):
            for i in range(6):
                for j in cols:
                    e = pred[b, i, j] - target[b, i, j]
                    ae += abs(e)
                    se += e * e
                    n += 1
                    if abs(target[b, i, j]) > 1.0:
                        ape += abs(e) / abs(target[b, i, j])
                        n_ape += 1
        cell = got.cells[key]
        if (abs(cell.mae - ae / n) > tol or abs(cell.rmse - np.sqrt(se / n)) > tol
                or abs(cell.mape - 100 * ape / n_ape) > tol):
            return False, f"{key} disagrees with the element loop"
    return True, "hand case and loop oracle agree"


def check_determinism() -> tuple[bool, str]:
    cfg = ModelConfig(N=4, L=4, F=4, D_F=4, D_S=4, D_d=4, D_w=4, g=2, K=2, num_layers=2, seed=9)
    a, b = M3Net(cfg), M3Net(cfg)
    for pa, pb in zip(a.store, b.store):
        if not np.array_equal(pa.data, pb.data):
            return False, f"parameter {pa.name} differs between identical builds"
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 4, 1)).astype(np.float32)
    tod, dow = np.array([0, 100, 287]), np.array([0, 3, 6])
    if not np.array_equal(a.forward(x, tod, dow).data, b.forward(x, tod, dow).data):
        return False, "forward outputs differ between identical builds"
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(a.store, cfg, path)
        ckpt = load_checkpoint(path)
        for p in a.store:
            if not np.array_equal(p.data, ckpt.params[p.name].data):
                return False, f"checkpoint round trip changed {p.name}"
    splits = make_windows(synthetic_series(200, 3), 4, 4, split=SplitSpec(1.0, 0.0, 0.0))
    o1 = [bt.tod_idx for bt in batches(splits.train, 16, shuffle_seed=4, epoch=2)]
    o2 = [bt.tod_idx for bt in batches(splits.train, 16, shuffle_seed=4, epoch=2)]
    if not all(np.array_equal(u, v) for u, v in zip(o1, o2)):
        return False, "batch order not reproducible"
    return True, "builds, forward, checkpoint and batch order reproducible"


GROUPS: dict[str, Callable[[], tuple[bool, str]]] = {
    "kernel-gradients": check_kernel_gradients,
    "model-gradients": check_model_gradients,
    "layer-oracles": check_layer_oracles,
    "degenerate-cases": check_degenerate_cases,
    "metric-oracles": check_metric_oracles,
    "determinism": check_determinism,
}


def run(groups=None, out=None) -> bool:
    """Run the named groups (all by default), printing one line each."""
    out = out or io.StringIO()
    ok = True
    for name in groups or GROUPS:
        t0 = time.perf_counter()
        try:
            passed, detail = GROUPS[name]()
        except Exception as exc:  # a crash counts as a failure of that group
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<18} {detail} "
              f"({time.perf_counter() - t0:.1f}s)", file=out)
    return ok
