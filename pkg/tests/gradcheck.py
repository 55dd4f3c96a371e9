"""Central finite-difference checks against autograd on sampled scalar entries."""
import torch


def sample_entries(params, n, gen):
    """Pick ``n`` (tensor, flat index) pairs spread over the given named parameters."""
    named = [(name, p) for name, p in params if p.numel()]
    picks = []
    for k in range(n):
        # cover every tensor once before sampling tensors at random
        j = k if k < len(named) else int(torch.randint(len(named), (1,), generator=gen))
        name, p = named[j]
        picks.append((name, p, int(torch.randint(p.numel(), (1,), generator=gen))))
    return picks


def check(fn, picks, h=1e-6, rel_tol=1e-3, abs_floor=1e-6):
    """Return the worst relative error; asserts every entry is within ``rel_tol``."""
    for _, p, _ in picks:
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, [p for _, p, _ in picks], allow_unused=True)
    worst = 0.0
    failures = []
    with torch.no_grad():
        for (name, p, i), g in zip(picks, grads):
            analytic = 0.0 if g is None else float(g.reshape(-1)[i])
            flat = p.view(-1)
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            worst = max(worst, rel)
            if rel >= rel_tol:
                failures.append((name, i, analytic, numeric, rel))
    assert not failures, failures
    return worst
