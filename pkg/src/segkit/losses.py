"""Segmentation losses over probability maps.

Every loss takes per-pixel probabilities of shape (B, K, *spatial) with
softmax already applied, and a target that is either a class-id map of
shape (B, *spatial) or a one-hot map of shape (B, K, *spatial). All return
a finite nonnegative scalar tensor differentiable w.r.t. pred.

Probabilities are clamped to >= 1e-6 before any log; the Dice family uses
a 1e-5 smoothing term.
"""

import math
from dataclasses import dataclass

import torch

from .errors import ShapeError

EPS_DICE = 1e-5
EPS_LOG = 1e-6


@dataclass
class LossConfig:
    """Loss selection and shared hyperparameters for combined_loss.

    names/weights pick the mixture; the remaining fields parameterize
    individual losses (GCE exponent q, noise-robust Dice gamma_nr, focal
    gamma_focal, exp-log settings, ignore_value for partial labels).
    """

    names: tuple = ("dice", "cross_entropy")
    weights: tuple = (0.5, 0.5)
    q: float = 0.7
    gamma_nr: float = 1.5
    gamma_focal: float = 2.0
    gamma_exp: float = 0.3
    explog_w_dice: float = 0.8
    explog_w_ce: float = 0.2
    epsilon: float = EPS_DICE
    ignore_value: int = None

    def __post_init__(self):
        self.names = tuple(self.names)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.names) != len(self.weights):
            raise ValueError("loss names and weights differ in length")
        if not 0 < self.q <= 1:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if not 1 <= self.gamma_nr <= 2:
            raise ValueError(f"gamma_nr must be in [1, 2], got {self.gamma_nr}")


def _check_pred(pred):
    if pred.dim() < 3:
        raise ShapeError(f"pred must be (B, K, *spatial), got shape {tuple(pred.shape)}")


def _one_hot(pred, target):
    """Target as float one-hot (B, K, *spatial); validates shape and range."""
    _check_pred(pred)
    k = pred.shape[1]
    if target.shape == pred.shape:
        return target.float()
    expected = pred.shape[:1] + pred.shape[2:]
    if tuple(target.shape) != tuple(expected):
        raise ShapeError(
            f"target shape {tuple(target.shape)} matches neither pred "
            f"{tuple(pred.shape)} nor id-map {tuple(expected)}"
        )
    tgt = target.long()
    if tgt.numel() and (tgt.min() < 0 or tgt.max() >= k):
        raise ShapeError(
            f"target ids outside [0, {k}): min {int(tgt.min())}, max {int(tgt.max())}"
        )
    oh = torch.nn.functional.one_hot(tgt, num_classes=k)
    # move class axis next to batch
    oh = oh.permute(0, oh.dim() - 1, *range(1, oh.dim() - 1)).float()
    return oh


def _p_true(pred, target):
    """Per-pixel probability of the target class, (B, *spatial)."""
    oh = _one_hot(pred, target)
    return (pred * oh).sum(dim=1)


def dice_loss(pred, target, epsilon=EPS_DICE):
    """1 - mean_k (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps), sums over batch and pixels."""
    g = _one_hot(pred, target)
    dims = (0,) + tuple(range(2, pred.dim()))
    inter = (pred * g).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (g * g).sum(dim=dims)
    score = (2.0 * inter + epsilon) / (denom + epsilon)
    return 1.0 - score.mean()


def cross_entropy_loss(pred, target):
    """Mean over batch and pixels of -log p at the target class."""
    g = _one_hot(pred, target)
    logp = torch.log(torch.clamp(pred, min=EPS_LOG))
    return -(g * logp).sum(dim=1).mean()


def focal_loss(pred, target, gamma_focal=2.0):
    """Mean of -(1 - p_y)^gamma * log p_y; gamma 0 reduces to cross entropy."""
    p_y = _p_true(pred, target)
    logp = torch.log(torch.clamp(p_y, min=EPS_LOG))
    return (-((1.0 - p_y) ** gamma_focal) * logp).mean()


def exp_log_loss(pred, target, w_dice=0.8, w_ce=0.2, gamma_exp=0.3, epsilon=EPS_DICE):
    """w_dice * mean_k (-ln Dice_k)^gamma + w_ce * mean (-ln p_y)^gamma."""
    g = _one_hot(pred, target)
    dims = (0,) + tuple(range(2, pred.dim()))
    inter = (pred * g).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (g * g).sum(dim=dims)
    dice_k = (2.0 * inter + epsilon) / (denom + epsilon)
    term_d = (-torch.log(torch.clamp(dice_k, min=EPS_LOG))).clamp(min=0) ** gamma_exp
    p_y = torch.clamp(_p_true(pred, target), min=EPS_LOG)
    term_c = (-torch.log(p_y)).clamp(min=0) ** gamma_exp
    return w_dice * term_d.mean() + w_ce * term_c.mean()


def gce_loss(pred, target, q=0.7):
    """Generalized cross entropy: mean of (1 - p_y^q) / q."""
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    p_y = torch.clamp(_p_true(pred, target), min=EPS_LOG)
    return ((1.0 - p_y ** q) / q).mean()


def mae_loss(pred, target):
    """Mean absolute difference between probabilities and one-hot target."""
    g = _one_hot(pred, target)
    return (pred - g).abs().mean()


def noise_robust_dice_loss(pred, target, gamma_nr=1.5, epsilon=EPS_DICE):
    """sum |p-g|^gamma / (sum p^2 + sum g^2 + eps) per class, averaged."""
    if not 1 <= gamma_nr <= 2:
        raise ValueError(f"gamma_nr must be in [1, 2], got {gamma_nr}")
    g = _one_hot(pred, target)
    dims = (0,) + tuple(range(2, pred.dim()))
    num = ((pred - g).abs() ** gamma_nr).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (g * g).sum(dim=dims) + epsilon
    return (num / denom).mean()


def partial_ce_loss(pred, target, ignore_value):
    """Cross entropy averaged over annotated pixels only; 0 when none are."""
    _check_pred(pred)
    expected = pred.shape[:1] + pred.shape[2:]
    if tuple(target.shape) != tuple(expected):
        raise ShapeError(
            f"partial targets must be an id map {tuple(expected)}, got {tuple(target.shape)}"
        )
    tgt = target.long()
    k = pred.shape[1]
    mask = tgt != int(ignore_value)
    bad = mask & ((tgt < 0) | (tgt >= k))
    if bool(bad.any()):
        raise ShapeError(f"annotated target ids outside [0, {k})")
    if not bool(mask.any()):
        return pred.sum() * 0.0
    safe = torch.where(mask, tgt, torch.zeros_like(tgt))
    oh = _one_hot(pred, safe)
    logp = torch.log(torch.clamp(pred, min=EPS_LOG))
    ce_map = -(oh * logp).sum(dim=1)
    return (ce_map * mask.float()).sum() / mask.float().sum()


def entropy_min_loss(pred):
    """Mean pixel entropy of pred normalized by ln K, so the range is [0, 1]."""
    _check_pred(pred)
    k = pred.shape[1]
    logp = torch.log(torch.clamp(pred, min=EPS_LOG))
    ent = -(pred * logp).sum(dim=1)
    if k < 2:
        return ent.mean() * 0.0
    return ent.mean() / math.log(k)


def total_variation_loss(pred):
    """Mean over all map entries of the summed forward-difference magnitudes.

    For each spatial axis the absolute forward differences are summed, and
    the total is divided by pred's element count.
    """
    _check_pred(pred)
    total = pred.sum() * 0.0
    for ax in range(2, pred.dim()):
        sl_a = [slice(None)] * pred.dim()
        sl_b = [slice(None)] * pred.dim()
        sl_a[ax] = slice(1, None)
        sl_b[ax] = slice(None, -1)
        total = total + (pred[tuple(sl_a)] - pred[tuple(sl_b)]).abs().sum()
    return total / pred.numel()


def mumford_shah_loss(pred, image, lambda_tv=0.01):
    """Piecewise-constant fit: sum_c mean(p_c * (I - mu_c)^2) + lambda * TV(pred).

    mu_c is the probability-weighted class mean intensity, treated as a
    constant during differentiation.
    """
    _check_pred(pred)
    if image.dim() == pred.dim() - 1:
        image = image.unsqueeze(1)
    if image.shape[0] != pred.shape[0] or image.shape[2:] != pred.shape[2:]:
        raise ShapeError(
            f"image shape {tuple(image.shape)} incompatible with pred {tuple(pred.shape)}"
        )
    img = image.to(pred.dtype).mean(dim=1, keepdim=True)    # collapse channels
    fidelity = pred.sum() * 0.0
    for c in range(pred.shape[1]):
        p_c = pred[:, c : c + 1]
        mu = (img * p_c).sum() / torch.clamp(p_c.sum(), min=EPS_LOG)
        fidelity = fidelity + (p_c * (img - mu.detach()) ** 2).mean()
    return fidelity + lambda_tv * total_variation_loss(pred)


def gated_crf_loss(pred, image, kernel_radius=2, sigma_pos=3.0, sigma_int=0.1, gate_mask=None):
    """Windowed pairwise smoothness penalty gated by a pixel mask (2D only).

    For every ordered pixel pair (i, j) with j in the (2r+1)^2 window around
    i (j != i, both inside the image, both gated in), the penalty is
    w_ij * sum_c p_i,c * (1 - p_j,c) with a Gaussian kernel over position
    and min-max-scaled intensity. Returns the mean over contributing pairs,
    or 0 when the gate removes every pair.
    """
    _check_pred(pred)
    if pred.dim() != 4:
        raise ShapeError("gated_crf_loss supports 2D maps (B, K, H, W) only")
    if image.dim() == 3:
        image = image.unsqueeze(1)
    if image.shape[0] != pred.shape[0] or image.shape[2:] != pred.shape[2:]:
        raise ShapeError(
            f"image shape {tuple(image.shape)} incompatible with pred {tuple(pred.shape)}"
        )
    b, k, h, w = pred.shape
    img = image.to(pred.dtype).mean(dim=1, keepdim=True)
    flat = img.reshape(b, -1)
    lo = flat.min(dim=1).values.reshape(b, 1, 1, 1)
    hi = flat.max(dim=1).values.reshape(b, 1, 1, 1)
    img = (img - lo) / torch.clamp(hi - lo, min=EPS_LOG)

    if gate_mask is None:
        gate = torch.ones(b, 1, h, w, dtype=pred.dtype, device=pred.device)
    else:
        gate = gate_mask.float().reshape(b, 1, h, w)

    r = int(kernel_radius)
    total = pred.sum() * 0.0
    count = torch.zeros((), dtype=pred.dtype, device=pred.device)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_n = slice(max(0, -dy), h + min(0, -dy))
            xs_n = slice(max(0, -dx), w + min(0, -dx))
            p_i = pred[:, :, ys, xs]
            p_j = pred[:, :, ys_n, xs_n]
            compat = (p_i * (1.0 - p_j)).sum(dim=1)
            d_int = img[:, 0, ys, xs] - img[:, 0, ys_n, xs_n]
            pos_w = math.exp(-(dy * dy + dx * dx) / (2.0 * sigma_pos ** 2))
            w_ij = pos_w * torch.exp(-(d_int ** 2) / (2.0 * sigma_int ** 2))
            pair_gate = gate[:, 0, ys, xs] * gate[:, 0, ys_n, xs_n]
            total = total + (w_ij * compat * pair_gate).sum()
            count = count + pair_gate.sum()
    if float(count) == 0.0:
        return pred.sum() * 0.0
    return total / count


LOSS_REGISTRY = {
    "dice": lambda p, t, c: dice_loss(p, t, c.epsilon),
    "cross_entropy": lambda p, t, c: cross_entropy_loss(p, t),
    "focal": lambda p, t, c: focal_loss(p, t, c.gamma_focal),
    "exp_log": lambda p, t, c: exp_log_loss(
        p, t, c.explog_w_dice, c.explog_w_ce, c.gamma_exp, c.epsilon
    ),
    "gce": lambda p, t, c: gce_loss(p, t, c.q),
    "mae": lambda p, t, c: mae_loss(p, t),
    "noise_robust_dice": lambda p, t, c: noise_robust_dice_loss(p, t, c.gamma_nr, c.epsilon),
    "partial_ce": lambda p, t, c: partial_ce_loss(p, t, c.ignore_value),
}


def combined_loss(pred, target, config):
    """Weighted sum of the configured losses."""
    if not config.names:
        raise ValueError("combined_loss needs at least one loss name")
    total = None
    for name, weight in zip(config.names, config.weights):
        if name not in LOSS_REGISTRY:
            raise ValueError(f"unknown loss '{name}'; known: {sorted(LOSS_REGISTRY)}")
        term = LOSS_REGISTRY[name](pred, target, config) * weight
        total = term if total is None else total + term
    return total
