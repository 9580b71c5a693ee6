"""Shared test oracles: finite-difference gradient checking and brute-force
metric/correlation references."""

import numpy as np
import torch


def fd_gradcheck(module: torch.nn.Module, loss_fn, eps: float = 1e-6) -> float:
    """Max guarded relative error between analytic gradients and central
    finite differences, over every parameter coordinate.

    ``loss_fn(module)`` must return a scalar computed in float64 from fixed
    inputs. The module is mutated in place (double precision) during the
    check.
    """
    module.double()
    for p in module.parameters():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn(module)
    loss.backward()
    worst = 0.0
    for p in module.parameters():
        analytic = p.grad.detach().reshape(-1).clone()
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                up = loss_fn(module).item()
            flat[i] = orig - eps
            with torch.no_grad():
                down = loss_fn(module).item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            a = analytic[i].item()
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


def brute_force_correlation(fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Reference all-pairs ReLU-clamped cosine: explicit nested loops."""
    c, gh, gw = fx.shape
    out = np.zeros((gh * gw, gh, gw), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            v = fx[:, i, j].astype(np.float64)
            nv = np.linalg.norm(v)
            for kr in range(gh):
                for kc in range(gw):
                    u = fy[:, kr, kc].astype(np.float64)
                    nu = np.linalg.norm(u)
                    if nv == 0.0 or nu == 0.0:
                        sim = 0.0
                    else:
                        sim = float(v @ u) / (nv * nu)
                    out[kr * gw + kc, i, j] = max(0.0, sim)
    return out


def brute_force_auc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pair-counting AUC: fraction of (forged, authentic) pixel pairs
    ordered correctly, ties counting one half."""
    scores = pred.ravel()
    labels = gt.ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def otsu_brute_force(gray: np.ndarray):
    """Exhaustive search over the 255 split thresholds, computing the
    between-class variance directly from pixel values."""
    best_t, best_score = None, -1.0
    flat = gray.ravel().astype(np.float64)
    for k in range(255):
        t = (k + 0.5) / 255.0
        low = flat[flat <= t]
        high = flat[flat > t]
        if low.size == 0 or high.size == 0:
            continue
        w0 = low.size / flat.size
        w1 = high.size / flat.size
        score = w0 * w1 * (high.mean() - low.mean()) ** 2
        if score > best_score:
            best_score = score
            best_t = t
    return best_t
