"""Shared test utilities: central finite differences against the recorded graph."""

import numpy as np

from cst import autodiff as ad

FD_STEP = 1e-4
FD_RTOL = 1e-3
FD_ATOL = 1e-6


def numeric_grad(fn, arrays, h=FD_STEP):
    """Central finite-difference gradients of scalar fn(*arrays) per array."""
    grads = []
    for idx, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn(*arrays)
            flat[i] = keep - h
            down = fn(*arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_close(a, b, rtol=FD_RTOL, atol=FD_ATOL, label=""):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    bad = np.abs(a - b) > (atol + rtol * scale)
    assert not bad.any(), (
        f"{label}: {int(bad.sum())}/{bad.size} mismatches, "
        f"worst {np.abs(a - b).max():.3e} vs scale {scale.max():.3e}")


def scalar_bilinear(values, target):
    """Independent per-pixel bilinear resize (same half-pixel convention)."""
    h, w = values.shape
    th, tw = target
    out = np.zeros(target)
    for r in range(th):
        for c in range(tw):
            sr = min(max((r + 0.5) * h / th - 0.5, 0.0), h - 1.0)
            sc = min(max((c + 0.5) * w / tw - 0.5, 0.0), w - 1.0)
            r0, c0 = int(np.floor(sr)), int(np.floor(sc))
            r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
            fr, fc = sr - r0, sc - c0
            top = values[r0, c0] * (1 - fc) + values[r0, c1] * fc
            bot = values[r1, c0] * (1 - fc) + values[r1, c1] * fc
            out[r, c] = top * (1 - fr) + bot * fr
    return out


def check_param_gradients(store, names, build_loss, label, h=FD_STEP):
    """Compare recorded gradients of build_loss() against finite differences
    taken directly in parameter space.

    build_loss must rebuild the graph from the store's current values each
    call (no caching), so nudging a parameter in place reruns the model.
    """
    ad.backward(build_loss())
    recorded = {name: store[name].grad.copy() for name in names}
    for name in names:
        store[name].zero_grad()
    for name in names:
        values = store[name].values.reshape(-1)
        numeric = np.zeros_like(values)
        for i in range(values.size):
            keep = values[i]
            values[i] = keep + h
            up = build_loss().values
            values[i] = keep - h
            down = build_loss().values
            values[i] = keep
            numeric[i] = (float(up) - float(down)) / (2.0 * h)
        assert_close(recorded[name], numeric.reshape(store[name].values.shape),
                     label=f"{label} {name}")


def check_op_gradient(build, arrays, label, h=FD_STEP):
    """Compare recorded-graph gradients of sum(build(tensors)) to finite differences.

    `build` maps Tensors to an output Tensor; the scalar under test is the
    weighted sum of its elements (fixed weights decorrelate components).
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = np.linspace(0.5, 1.5, out.values.size).reshape(out.values.shape)
    loss = ad.sum_(ad.mul(out, ad.constant(weights)))
    ad.backward(loss)

    def scalar(*arrs):
        ts = [ad.Tensor(a) for a in arrs]
        return float((build(*ts).values * weights).sum())

    numeric = numeric_grad(scalar, [a.copy() for a in arrays], h=h)
    for t, num, arr in zip(tensors, numeric, arrays):
        assert_close(t.grad, num, label=f"{label} grad")
