import numpy as np
import pytest

from segkit.volio import Sample, Volume


def make_blob_samples(n, num_classes=2, size=24, seed=0, scribble=False):
    """In-memory labeled circle phantoms for quick training tests.

    With scribble=True labels keep one foreground and one background pixel
    and set everything else to ignore (= num_classes).
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = rng.normal(0.0, 0.3, (1, size, size)).astype(np.float32)
        lab = np.zeros((1, size, size), np.int64)
        r = int(rng.integers(4, max(5, size // 3)))
        cy, cx = rng.integers(size // 4, 3 * size // 4, 2)
        yy, xx = np.mgrid[:size, :size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        cls = int(rng.integers(1, num_classes))
        lab[0][mask] = cls
        img[0][mask] += 1.0 + 0.3 * cls
        if scribble:
            sc = np.full_like(lab, num_classes)
            sc[0, cy, cx] = cls
            sc[0, 0, 0] = 0
            lab = sc
        out.append(Sample(image=Volume(img), label=Volume(lab, is_label=True), id=f"blob{i}"))
    return out


@pytest.fixture
def blob_samples():
    return make_blob_samples(8)


def fd_gradient_relerr(fn, logits, eps=1e-6):
    """Relative L2 error between autograd and central-difference gradients.

    fn maps a probability map (softmax of logits) to a scalar loss; the
    derivative is taken w.r.t. the logits so perturbations stay on the
    simplex.
    """
    import torch

    z = logits.detach().double().clone().requires_grad_(True)
    fn(torch.softmax(z, dim=1)).backward()
    grad = z.grad.detach().reshape(-1).clone()
    flat = z.detach().reshape(-1)
    fd = torch.zeros_like(flat)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            bumped = flat.clone()
            bumped[i] += sign * eps
            with torch.no_grad():
                fd[i] += sign * float(fn(torch.softmax(bumped.reshape(z.shape), dim=1)))
    fd /= 2.0 * eps
    return float((grad - fd).norm()) / max(float(fd.norm()), 1e-12)
