"""Central-difference gradient checking.

The relative error for a parameter tensor is ``|a - n| / max(1e-8, |a| + |n|)``
with ``|.|`` the Euclidean norm over the tensor, ``a`` the analytic gradient
and ``n`` the numerical one. Parameters should be float64 before checking.

The 1e-8 floor is absolute. Key-projection biases have an identically zero
gradient (adding a constant to every score of a row leaves softmax unchanged),
so their finite differences are pure round-off, roughly 1e-16 * |f| / h. The
standard suites therefore keep the checked objective at |f| <= O(1) via
``OBJECTIVE_SCALE`` so that round-off stays well under the floor.

ReLU and clamp are not differentiable at their switch points. When a probe
at ``x +/- h`` flips any ReLU/clamp decision relative to ``x`` the difference
quotient straddles a kink; the step is then shrunk tenfold (down to
``min_h``) until the activation pattern is stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, RngState, Tensor, no_grad, record_kinks


class GradCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


@dataclass
class TensorCheck:
    name: str
    shape: tuple
    rel_error: float
    max_abs_error: float
    entries_checked: int
    kinks_avoided: int = 0


@dataclass
class GradCheckReport:
    checks: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((c.rel_error for c in self.checks), default=0.0)

    def passed(self, tol=1e-4):
        return all(c.rel_error < tol for c in self.checks)

    def failures(self, tol=1e-4):
        return [c for c in self.checks if not c.rel_error < tol]

    def lines(self):
        return [f"{c.name:<40s} {str(c.shape):<14s} rel={c.rel_error:.3e} "
                f"abs={c.max_abs_error:.3e} n={c.entries_checked} kinks={c.kinks_avoided}" for c in self.checks]


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(n)))


def _eval(f):
    with no_grad(), record_kinks() as kinks:
        val = float(np.asarray(f().data, dtype=np.float64))
    if not np.isfinite(val):
        raise GradCheckError(f"function value is not finite: {val}")
    return val, kinks


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(f, flat, k, h, base, min_h):
    orig = flat[k]
    step = h
    while True:
        flat[k] = orig + step
        fp, kp = _eval(f)
        flat[k] = orig - step
        fm, km = _eval(f)
        flat[k] = orig
        if step / 10 < min_h or (_same_pattern(kp, base) and _same_pattern(km, base)):
            return (fp - fm) / (2 * step), step != h
        step /= 10


def grad_check(f, params, h=1e-3, max_entries=None, seed=0, min_h=1e-7):
    """Compare backprop gradients of scalar ``f()`` against central differences.

    ``params`` maps names to tensors that require grad (Parameters or leaf
    tensors). ``max_entries`` caps the number of coordinates probed per tensor;
    ``None`` probes all of them.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None if not hasattr(p, "trainable") else np.zeros_like(p.data)
    out = f()
    if not np.isfinite(out.data).all():
        raise GradCheckError("function value is not finite")
    out.backward()
    _, base = _eval(f)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in params.items():
        analytic = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else np.asarray(p.grad, np.float64)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        shrunk = 0
        for j, k in enumerate(idx):
            numeric[j], moved = _central_difference(f, flat, k, h, base, min_h)
            shrunk += moved
        a = analytic.reshape(-1)[idx]
        report.checks.append(TensorCheck(
            name=name, shape=tuple(p.shape), rel_error=relative_error(a, numeric),
            max_abs_error=float(np.max(np.abs(a - numeric))) if idx.size else 0.0,
            entries_checked=int(idx.size), kinks_avoided=shrunk))
    return report


# -- standard suites ------------------------------------------------------------
OBJECTIVE_SCALE = 0.1

def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _param(rng, *shape):
    return Parameter(rng.normal(size=shape), dtype=np.float64)


def primitive_suite(seed=0, h=1e-3):
    """Gradient checks for every primitive; returns ``[(name, report), ...]``."""
    from . import functional as F
    from .attention import MhaParams, multi_head_attention, scaled_dot_attention
    from .nn import FeedForward
    from .training import bce_with_logits, caer_loss, mse

    rng = np.random.default_rng(seed)
    out = []

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w_out = rng.normal(size=(3, 2))
    out.append(("matmul", grad_check(lambda: (F.to_tensor(a) @ b * w_out).sum(), {"a": a, "b": b}, h)))

    x = _leaf(rng, 3, 5)
    mask = np.array([True, True, False, True, True])
    w5 = rng.normal(size=(3, 5))
    out.append(("softmax_rows", grad_check(lambda: (F.softmax_rows(x, mask) * w5).sum(), {"x": x}, h)))

    x = _leaf(rng, 4, 6)
    gamma, beta = _param(rng, 6), _param(rng, 6)
    w6 = rng.normal(size=(4, 6))
    out.append(("layer_norm", grad_check(lambda: (F.layer_norm(x, gamma, beta) * w6).sum(),
                                         {"x": x, "gamma": gamma, "beta": beta}, h)))

    x, W, bias = _leaf(rng, 3, 4), _param(rng, 4, 5), _param(rng, 5)
    w35 = rng.normal(size=(3, 5))
    out.append(("linear", grad_check(lambda: (F.linear(x, W, bias) * w35).sum(),
                                     {"x": x, "W": W, "b": bias}, h)))

    ff = FeedForward(4, rng, dtype=np.float64)
    for p in ff.parameters():
        p.data = rng.normal(size=p.shape)
    x = _leaf(rng, 3, 4)
    w34 = rng.normal(size=(3, 4))
    params = {"x": x, **dict(ff.named_parameters())}
    out.append(("ffn", grad_check(lambda: (F.ffn(x, ff) * w34).sum(), params, h)))

    x = _leaf(rng, 3, 4)
    out.append(("dropout", grad_check(
        lambda: (F.dropout(x, 0.3, "train", RngState(seed)) * w34).sum(), {"x": x}, h)))

    x = _leaf(rng, 2, 5, 3)
    pmask = np.array([[True, False, True, True, False], [True, True, True, True, True]])
    w23 = rng.normal(size=(2, 3))
    out.append(("masked_mean_pool", grad_check(lambda: (F.masked_mean_pool(x, pmask) * w23).sum(),
                                               {"x": x}, h)))

    u, v = _leaf(rng, 3), _leaf(rng, 2)
    w5v = rng.normal(size=5)
    out.append(("concat_last", grad_check(lambda: (F.concat_last(u, v) * w5v).sum(), {"a": u, "b": v}, h)))

    q, k, vv = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    kmask = np.array([True, True, True, False, True])
    out.append(("scaled_dot_attention", grad_check(
        lambda: (scaled_dot_attention(q, k, vv, kmask)[0] * w34).sum(), {"Q": q, "K": k, "V": vv}, h)))

    mha = MhaParams(8, 2, rng, dtype=np.float64)
    for p in mha.parameters():
        p.data = rng.normal(scale=0.3, size=p.shape)
    q, k, vv = _leaf(rng, 3, 8), _leaf(rng, 5, 8), _leaf(rng, 5, 8)
    w38 = rng.normal(scale=0.1, size=(3, 8))
    params = {"Q": q, "K": k, "V": vv, **dict(mha.named_parameters())}
    out.append(("multi_head_attention", grad_check(
        lambda: (multi_head_attention(mha, q, k, vv, kmask) * w38).sum(), params, h)))

    logits = _leaf(rng, 4, 6)
    y_bin = (rng.random((4, 6)) > 0.5).astype(np.float64)
    out.append(("bce_with_logits", grad_check(lambda: bce_with_logits(logits, y_bin), {"logits": logits}, h)))
    pred = _leaf(rng, 4, 3)
    target = rng.random((4, 3))
    out.append(("mse", grad_check(lambda: mse(pred, target), {"pred": pred}, h)))
    y_cls = rng.integers(0, 6, size=4)
    out.append(("cross_entropy", grad_check(lambda: caer_loss(logits, y_cls), {"logits": logits}, h)))
    out.append(("softmax_cross_entropy", grad_check(
        lambda: -(F.log_softmax(logits) * np.eye(6)[y_cls]).sum() / 4
        + 0 * F.softmax_rows(logits).sum(), {"logits": logits}, h)))
    return out


def toy_batch(config, rng, batch=2):
    from .model import StreamBatch

    c = config
    mask = np.ones((batch, c.t_fg), dtype=bool)
    mask[0, c.t_fg // 2 + 1:] = False
    return StreamBatch(rng.normal(size=(batch, c.t_pe, c.d_pe)),
                       rng.normal(size=(batch, c.t_fg, c.d_fg)),
                       rng.normal(size=(batch, c.t_vs, c.d_vs)), mask)


def model_suite(variant="mha", task="multilabel_cont", seed=0, h=1e-3, max_entries=None):
    """Full-model gradient check at the toy geometry with dropout off.

    Parameters are probed group by group. A stream's parameters cannot move
    the other stream's output, and head parameters see only the fused vector,
    so those parts are computed once per group and reused across probes. The
    checked function is the full loss in every case.
    """
    from . import functional as F
    from .model import TOY_GEOMETRY, McfConfig, McfModel, foreground_stream, heads_forward, visual_stream
    from .training import caer_loss, emotic_loss

    config = McfConfig(variant=variant, n_layers=2, heads=2, d_model=16, task=task, dropout_p=0.0,
                       seed=seed, **TOY_GEOMETRY)
    model = McfModel(config, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    # move LN affine parameters and biases off their init so their gradients are generic
    for name, p in model.named_parameters():
        if name.endswith(("gamma", "beta")) or name.split("/")[-1].startswith("b"):
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    batch = toy_batch(config, rng)
    if task == "multilabel_cont":
        y_disc = (rng.random((2, config.n_disc)) > 0.5).astype(np.float64)
        y_cont = rng.random((2, 3))

        def loss(out):
            return emotic_loss(out.disc_logits, out.cont, y_disc, y_cont, 0.8, 0.2) * OBJECTIVE_SCALE
    else:
        y = rng.integers(0, config.n_disc, size=2)

        def loss(out):
            return caer_loss(out.disc_logits, y) * OBJECTIVE_SCALE

    def fg():
        return F.masked_mean_pool(foreground_stream(model, batch))

    def vs():
        return F.masked_mean_pool(visual_stream(model, batch))

    with no_grad():
        fg_fixed, vs_fixed = fg(), vs()
    fixed_fusion = F.concat_last(fg_fixed, vs_fixed)
    groups = {"fg_": lambda: (fg(), vs_fixed), "vs_": lambda: (fg_fixed, vs())}
    params = dict(model.named_parameters())
    report = GradCheckReport()

    def run(names, f):
        sub = grad_check(f, {n: params[n] for n in names}, h, max_entries=max_entries, seed=seed)
        report.checks.extend(sub.checks)

    run([n for n in params if n.startswith("pe_")],
        lambda: loss(heads_forward(model, F.concat_last(fg(), vs()))))
    for prefix, streams in groups.items():
        run([n for n in params if n.startswith(prefix)],
            lambda streams=streams: loss(heads_forward(model, F.concat_last(*streams()))))
    run([n for n in params if n.startswith(("disc_head", "cont_head"))],
        lambda: loss(heads_forward(model, fixed_fusion)))
    order = list(params)
    report.checks.sort(key=lambda c: order.index(c.name))
    assert len(report.checks) == len(params)
    return report
