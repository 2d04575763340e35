import numpy as np

FD_STEP = 1e-5
GRAD_RTOL = 1e-6
# both gradients below this are treated as the same (structural) zero
ZERO_GRAD = 1e-8


def numerical_grad(f, x, step=FD_STEP):
    """Central differences of the scalar function ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric):
    """Max abs deviation relative to the larger of the two gradients' max magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0))
    if scale < ZERO_GRAD:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def naive_conv2d(x, w, b, stride, padding):
    """Direct sliding-window summation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[bi, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def kink_margin(gen, x):
    """Smallest |pre-activation| at any ReLU / leaky-ReLU in a generator forward pass.

    Central differences are only meaningful when no perturbation moves a unit
    across its kink, so gradient checks draw instances with a safe margin.
    """
    from asapnet.generator import AblationMode, predict_grid
    from asapnet.mlp import _pixel_inputs, block_weights, grid_to_rows, to_blocks

    margin = np.inf
    grid, hcache = predict_grid(gen, x, keep_cache=True)
    if gen.mode is not AblationMode.SPATIALLY_UNIFORM:
        margin = min(float(np.abs(z).min()) for z in hcache.normed)
    h = to_blocks(_pixel_inputs(x, gen.positional_encoding(), gen.spec), gen.factors.total)
    for w, b in block_weights(grid_to_rows(grid), gen.spec)[:-1]:
        z = np.matmul(h, w.transpose(0, 2, 1)) + b[:, None, :]
        margin = min(margin, float(np.abs(z).min()))
        h = np.maximum(z, 0)
    return margin
