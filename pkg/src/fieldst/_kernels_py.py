"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Operation order matches the Cython code exactly; tests compare both
backends bitwise.
"""

import numpy as np


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v) * (1.0 / np.sqrt(bc2)) + eps
    update = ((lr / bc1) * m) / denom
    p *= 1.0 - lr * weight_decay
    p -= update


def neg_laplacian(u, out):
    padded = np.pad(u, 1)
    out[...] = (
        4.0 * u
        - padded[:-2, 1:-1]
        - padded[2:, 1:-1]
        - padded[1:-1, :-2]
        - padded[1:-1, 2:]
    )


def voronoi_assign(rows, cols, height, width, chunk=4096):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    cell_r, cell_c = np.divmod(np.arange(height * width, dtype=np.int64), width)
    out = np.empty(height * width, dtype=np.intp)
    for start in range(0, height * width, chunk):
        r = cell_r[start:start + chunk, None] - rows[None, :]
        c = cell_c[start:start + chunk, None] - cols[None, :]
        # argmin returns the first minimum, i.e. the lowest sensor index on ties
        out[start:start + chunk] = np.argmin(r * r + c * c, axis=1)
    return out.reshape(height, width)


def weighted_l1_terms(pred, target, weight, terms, grad, inv_count):
    d = target - pred
    terms[...] = weight * np.abs(d)
    scaled = weight * inv_count
    grad[...] = np.where(d > 0.0, -scaled, np.where(d < 0.0, scaled, 0.0))


def leaky_relu(z, out, slope):
    out[...] = np.where(z > 0.0, z, slope * z)


def leaky_relu_grad(z, grad, slope):
    grad[...] = np.where(z > 0.0, grad, slope * grad)
