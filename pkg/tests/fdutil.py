"""Central finite-difference gradient checking against autograd."""
import numpy as np
import torch


def fd_check(loss_fn, params, n_coords, rng: np.random.Generator, h=1e-3,
             rtol=1e-4, scale_floor=1e-6, atol_small=1e-8):
    """Compare autograd gradients with central differences on random
    parameter coordinates.

    Coordinates where both gradients are below scale_floor are held to an
    absolute tolerance instead (relative error is meaningless there). Returns
    the list of (fd, analytic) pairs actually checked.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    usable = [(p, g) for p, g in zip(params, grads) if g is not None]
    assert usable, "loss depends on none of the given parameters"
    checked = []
    for _ in range(n_coords):
        p, g = usable[int(rng.integers(len(usable)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
        lp = float(loss_fn())
        with torch.no_grad():
            p[idx] = orig - h
        lm = float(loss_fn())
        with torch.no_grad():
            p[idx] = orig
        fd = (lp - lm) / (2.0 * h)
        an = float(g[idx])
        denom = max(abs(fd), abs(an))
        if denom > scale_floor:
            rel = abs(fd - an) / denom
            assert rel < rtol, f"rel err {rel:.3e} at {idx} (fd={fd:.6e}, an={an:.6e})"
        else:
            assert abs(fd - an) < atol_small, f"abs err {abs(fd - an):.3e} at {idx}"
        checked.append((fd, an))
    return checked
