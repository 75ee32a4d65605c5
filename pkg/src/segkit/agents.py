"""Training agents: the supervised loop plus one step function per paradigm.

A paradigm is selected by name in AgentConfig and dispatched through the
PARADIGMS registry. Each step op consumes a Batch, performs exactly one
optimizer update (per network) and returns a dict of weighted loss
components whose values sum to the differentiated scalar under "total".

Conventions shared by all steps:
  - every consistency/regularization weight follows rampup_weight
  - masked means over empty pixel sets are 0, never NaN
  - all randomness is drawn from state.np_rng / state.torch_gen or from
    seeds derived from (config.seed, iteration), so equal seeds give
    bitwise-equal runs on equal data
"""

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigError, EmptyStreamError
from .infer import sliding_window_infer
from .losses import (
    EPS_LOG,
    LossConfig,
    _one_hot,
    combined_loss,
    cross_entropy_loss,
    entropy_min_loss,
    gated_crf_loss,
    mumford_shah_loss,
    partial_ce_loss,
    total_variation_loss,
)
from .metrics import overlap_metrics
from .nets import (
    NetworkSpec,
    build_network,
    clone_network,
    forward_stochastic,
    save_checkpoint,
)
from .volio.batches import ArrayBatchSource, CyclingStream, aggregate_batch


@dataclass
class AgentConfig:
    """Everything a training run needs besides the data itself.

    lambda_max is the peak consistency/regularization weight, ema_alpha
    the teacher decay, mc_passes the stochastic forward count T,
    select_ratio_final the final discard ratio rho for small-loss
    selection, rank_fraction the clean fraction for divergence ranking,
    smoothing the label-softening amount of the relabeling stage and
    relabel_at its stage-1 iteration count (0: reuse max_iterations).
    """

    paradigm: str = "fully_sup"
    max_iterations: int = 1000
    validation_interval: int = 100
    base_lr: float = 1e-3
    ramp_length: int = 0            # 0: ramp over all of training
    lambda_max: float = 0.1
    ema_alpha: float = 0.99
    mc_passes: int = 4
    select_ratio_final: float = 0.2
    rank_fraction: float = 0.8
    smoothing: float = 0.2
    relabel_at: int = 0
    input_noise_std: float = 0.05
    n_labeled: int = 2
    n_unlabeled: int = 0
    seed: int = 0
    lr_patience: int = 10
    lr_factor: float = 0.5
    checkpoint_dir: str = ""
    ignore_value: int = None
    network: NetworkSpec = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(
                f"unknown paradigm '{self.paradigm}'; known: {sorted(PARADIGMS)}"
            )
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError(f"ema_alpha must be in [0, 1], got {self.ema_alpha}")
        if not 0.0 <= self.select_ratio_final <= 1.0:
            raise ConfigError(
                f"select_ratio_final must be in [0, 1], got {self.select_ratio_final}"
            )
        if not 0.0 < self.rank_fraction <= 1.0:
            raise ConfigError(f"rank_fraction must be in (0, 1], got {self.rank_fraction}")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ConfigError(f"smoothing must be in [0, 1], got {self.smoothing}")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.max_iterations > 0 and self.ramp_length > self.max_iterations:
            raise ConfigError(
                f"ramp_length {self.ramp_length} exceeds max_iterations {self.max_iterations}"
            )
        if self.validation_interval < 1:
            raise ConfigError("validation_interval must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.mc_passes < 1:
            raise ConfigError("mc_passes must be >= 1")
        if self.n_labeled < 1 or self.n_unlabeled < 0:
            raise ConfigError("need n_labeled >= 1 and n_unlabeled >= 0")

    @property
    def effective_ramp(self):
        return self.ramp_length if self.ramp_length > 0 else max(1, self.max_iterations)

    @property
    def effective_ignore(self):
        if self.ignore_value is not None:
            return int(self.ignore_value)
        return int(self.network.num_classes)


@dataclass
class TrainState:
    config: AgentConfig
    nets: list
    optimizers: list
    schedulers: list
    teacher: object = None
    iteration: int = 0
    best_metric: float = float("-inf")
    best_checkpoint: str = ""
    loss_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    np_rng: object = None
    torch_gen: object = None


# ---------------------------------------------------------------------------
# schedules and parameter averaging


def rampup_weight(t, ramp_length, lambda_max):
    """lambda_max * exp(-5 (1 - min(t/ramp, 1))^2); the usual sigmoid ramp."""
    if ramp_length <= 0:
        return float(lambda_max)
    phase = 1.0 - min(float(t) / float(ramp_length), 1.0)
    return float(lambda_max) * math.exp(-5.0 * phase * phase)


def _module_tensors(module):
    named = dict(module.named_parameters())
    named.update(dict(module.named_buffers()))
    return named


def ema_update(student, teacher, alpha):
    """theta_T <- alpha*theta_T + (1-alpha)*theta_S, elementwise, in place.

    Accepts two modules (parameters and floating-point buffers averaged;
    integer buffers are bookkeeping and left alone) or two sequences of
    tensors. Mismatched sets raise ValueError. Returns the teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(student, torch.nn.Module) and isinstance(teacher, torch.nn.Module):
        s_named, t_named = _module_tensors(student), _module_tensors(teacher)
        if set(s_named) != set(t_named):
            raise ValueError("student and teacher parameter sets differ")
        pairs = [(s_named[k], t_named[k]) for k in sorted(s_named)]
    else:
        s_list, t_list = list(student), list(teacher)
        if len(s_list) != len(t_list):
            raise ValueError(f"parameter count mismatch: {len(s_list)} vs {len(t_list)}")
        pairs = list(zip(s_list, t_list))
    with torch.no_grad():
        for s, t in pairs:
            if s.shape != t.shape:
                raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
            if torch.is_floating_point(t):
                t.mul_(alpha).add_(s.to(t.dtype), alpha=1.0 - alpha)
    return teacher


def masked_mean(values, mask):
    """Mean of `values` where `mask` is true; 0 when the mask is empty."""
    w = mask.to(values.dtype)
    denom = w.sum()
    if float(denom) == 0.0:
        return values.sum() * 0.0
    return (values * w).sum() / denom


def uamt_threshold(t, ramp_length, num_classes):
    """Uncertainty gate ramping from 0.75*ln K up to ln K over the ramp."""
    frac = 1.0 if ramp_length <= 0 else min(float(t) / float(ramp_length), 1.0)
    return (0.75 + 0.25 * frac) * math.log(num_classes)


def select_small_loss(scores, keep):
    """Indices of the `keep` smallest scores, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(scores, kind="stable")[: int(keep)]


# ---------------------------------------------------------------------------
# shared step plumbing


def _batch_tensors(batch):
    x = torch.from_numpy(np.ascontiguousarray(batch.images, dtype=np.float32))
    y = torch.from_numpy(np.ascontiguousarray(batch.labels))
    y = y.float() if torch.is_floating_point(y) else y.long()
    return x, y


def _apply(state, total):
    for opt in state.optimizers:
        opt.zero_grad(set_to_none=True)
    total.backward()
    for opt in state.optimizers:
        opt.step()
    state.iteration += 1


def _scalar(value):
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _components(total, **terms):
    out = {name: _scalar(value) for name, value in terms.items()}
    out["total"] = _scalar(total)
    return out


def _perturb(x, std, gen):
    if std <= 0:
        return x
    return x + torch.randn(x.shape, generator=gen, dtype=x.dtype) * std


def _derived_seed(state):
    return (int(state.config.seed) * 1000003 + state.iteration * 97 + 13) % (2**31)


def _teacher_probs(teacher, x):
    was_training = teacher.training
    teacher.eval()
    try:
        with torch.no_grad():
            probs = torch.softmax(teacher(x), dim=1)
    finally:
        teacher.train(was_training)
    return probs


def _per_sample_ce(pred, target):
    """Per-image mean cross entropy, (B,)."""
    oh = _one_hot(pred, target)
    logp = torch.log(torch.clamp(pred, min=EPS_LOG))
    ce = -(oh * logp).sum(dim=1)
    return ce.mean(dim=tuple(range(1, ce.dim())))


def _log(p):
    return torch.log(torch.clamp(p, min=EPS_LOG))


def _lambda(state):
    cfg = state.config
    return rampup_weight(state.iteration, cfg.effective_ramp, cfg.lambda_max)


def _select_ratio(state):
    """Kept-sample ratio R(t) = 1 - min(t/ramp, 1) * rho."""
    cfg = state.config
    frac = min(float(state.iteration) / float(cfg.effective_ramp), 1.0)
    return 1.0 - frac * cfg.select_ratio_final


# ---------------------------------------------------------------------------
# fully supervised


def supervised_step(state, batch):
    """One optimizer update on the combined supervised loss."""
    if batch.n_unlabeled > 0:
        raise ValueError("supervised_step expects a fully labeled batch")
    x, y = _batch_tensors(batch)
    pred = torch.softmax(state.nets[0](x), dim=1)
    sup = combined_loss(pred, y, state.config.loss)
    _apply(state, sup)
    return _components(sup, supervised=sup)


def _soft_ce_step(state, batch):
    """Cross entropy against soft label maps (relabeled retraining stage)."""
    x, y = _batch_tensors(batch)
    pred = torch.softmax(state.nets[0](x), dim=1)
    sup = cross_entropy_loss(pred, y)
    _apply(state, sup)
    return _components(sup, supervised=sup)


# ---------------------------------------------------------------------------
# semi-supervised steps


def ssl_em_step(state, batch):
    """Supervised loss on the labeled part plus ramped entropy of all predictions."""
    x, y = _batch_tensors(batch)
    nl = batch.n_labeled
    pred = torch.softmax(state.nets[0](x), dim=1)
    sup = combined_loss(pred[:nl], y, state.config.loss)
    lam = _lambda(state)
    ent = entropy_min_loss(pred)
    total = sup + lam * ent
    _apply(state, total)
    return _components(total, supervised=sup, entropy=lam * ent)


def mean_teacher_step(state, batch):
    """Student/teacher consistency on independently noised inputs, then EMA."""
    cfg = state.config
    x, y = _batch_tensors(batch)
    nl = batch.n_labeled
    x_student = _perturb(x, cfg.input_noise_std, state.torch_gen)
    x_teacher = _perturb(x, cfg.input_noise_std, state.torch_gen)
    pred = torch.softmax(state.nets[0](x_student), dim=1)
    sup = combined_loss(pred[:nl], y, cfg.loss)
    teacher_pred = _teacher_probs(state.teacher, x_teacher)
    cons = ((pred - teacher_pred) ** 2).mean()
    lam = _lambda(state)
    total = sup + lam * cons
    _apply(state, total)
    ema_update(state.nets[0], state.teacher, cfg.ema_alpha)
    return _components(total, supervised=sup, consistency=lam * cons)


def uamt_step(state, batch):
    """Mean teacher gated to pixels where the teacher is certain enough.

    Uncertainty is the entropy of the mean of T stochastic teacher passes;
    only pixels below the ramping threshold contribute to consistency.
    """
    cfg = state.config
    x, y = _batch_tensors(batch)
    nl = batch.n_labeled
    x_student = _perturb(x, cfg.input_noise_std, state.torch_gen)
    x_teacher = _perturb(x, cfg.input_noise_std, state.torch_gen)
    pred = torch.softmax(state.nets[0](x_student), dim=1)
    sup = combined_loss(pred[:nl], y, cfg.loss)

    stack = forward_stochastic(state.teacher, x_teacher, cfg.mc_passes, seed=_derived_seed(state))
    teacher_mean = stack.mean(dim=0)
    uncertainty = -(teacher_mean * _log(teacher_mean)).sum(dim=1)
    k = pred.shape[1]
    gate = uncertainty < uamt_threshold(state.iteration, cfg.effective_ramp, k)
    pixel_sq = ((pred - teacher_mean) ** 2).mean(dim=1)
    cons = masked_mean(pixel_sq, gate)
    lam = _lambda(state)
    total = sup + lam * cons
    _apply(state, total)
    ema_update(state.nets[0], state.teacher, cfg.ema_alpha)
    return _components(total, supervised=sup, consistency=lam * cons)


def urpc_step(state, batch):
    """Pyramid consistency with per-pixel uncertainty rectification.

    All decoder scales are upsampled to full resolution; each scale is
    pulled toward the scale average, downweighted where it diverges from
    it (w = exp(-KL(p_s || mean))), with deep supervision on the labels.
    """
    cfg = state.config
    x, y = _batch_tensors(batch)
    nl = batch.n_labeled
    outs = state.nets[0].forward_pyramid(x)
    size = x.shape[2:]
    mode = "bilinear" if x.dim() == 4 else "trilinear"
    probs = []
    for out in outs:
        if out.shape[2:] != size:
            out = torch.nn.functional.interpolate(out, size=size, mode=mode, align_corners=False)
        probs.append(torch.softmax(out, dim=1))

    sup = sum(combined_loss(p[:nl], y, cfg.loss) for p in probs) / len(probs)
    mean_p = torch.stack(probs).mean(dim=0)
    cons = x.sum() * 0.0
    if len(probs) > 1:
        log_mean = _log(mean_p)
        for p in probs:
            kl = (p * (_log(p) - log_mean)).sum(dim=1, keepdim=True)
            w = torch.exp(-kl).detach()
            cons = cons + ((p - mean_p) ** 2 * w).mean()
    lam = _lambda(state)
    total = sup + lam * cons
    _apply(state, total)
    return _components(total, supervised=sup, consistency=lam * cons)


def cct_step(state, batch):
    """Auxiliary decoders on a perturbed bottleneck chase the main decoder."""
    cfg = state.config
    x, y = _batch_tensors(batch)
    nl = batch.n_labeled
    main, auxes = state.nets[0].forward_aux(x, seed=_derived_seed(state))
    pred = torch.softmax(main, dim=1)
    sup = combined_loss(pred[:nl], y, cfg.loss)
    cons = x.sum() * 0.0
    if auxes and batch.n_unlabeled > 0:
        target = pred[nl:].detach()
        for aux in auxes:
            aux_p = torch.softmax(aux, dim=1)[nl:]
            cons = cons + ((aux_p - target) ** 2).mean()
        cons = cons / len(auxes)
    lam = _lambda(state)
    total = sup + lam * cons
    _apply(state, total)
    return _components(total, supervised=sup, consistency=lam * cons)


def cps_step(state, batch):
    """Two networks supervise each other with detached argmax pseudo labels."""
    cfg = state.config
    x, y = _batch_tensors(batch)
    nl = batch.n_labeled
    pred_a = torch.softmax(state.nets[0](x), dim=1)
    pred_b = torch.softmax(state.nets[1](x), dim=1)
    sup_a = combined_loss(pred_a[:nl], y, cfg.loss)
    sup_b = combined_loss(pred_b[:nl], y, cfg.loss)
    pseudo_a = pred_a.argmax(dim=1).detach()
    pseudo_b = pred_b.argmax(dim=1).detach()
    cross = cross_entropy_loss(pred_a, pseudo_b) + cross_entropy_loss(pred_b, pseudo_a)
    lam = _lambda(state)
    total = sup_a + sup_b + lam * cross
    _apply(state, total)
    return _components(
        total, supervised_a=sup_a, supervised_b=sup_b, cross_pseudo=lam * cross
    )


# ---------------------------------------------------------------------------
# weakly supervised (scribble) steps

_WSL_REGULARIZERS = ("entropy", "total_variation", "mumford_shah", "gated_crf")


def wsl_reg_step(state, batch, regularizer):
    """Partial cross entropy on scribbles plus a ramped unsupervised regularizer."""
    if regularizer not in _WSL_REGULARIZERS:
        raise ValueError(f"unknown regularizer '{regularizer}'; known: {_WSL_REGULARIZERS}")
    cfg = state.config
    x, y = _batch_tensors(batch)
    pred = torch.softmax(state.nets[0](x), dim=1)
    sup = partial_ce_loss(pred, y, cfg.effective_ignore)
    if regularizer == "entropy":
        reg = entropy_min_loss(pred)
    elif regularizer == "total_variation":
        reg = total_variation_loss(pred)
    elif regularizer == "mumford_shah":
        reg = mumford_shah_loss(pred, x)
    else:
        reg = gated_crf_loss(pred, x)
    lam = _lambda(state)
    total = sup + lam * reg
    _apply(state, total)
    return _components(total, supervised=sup, regularization=lam * reg)


def ustm_step(state, batch):
    """Uncertainty-gated transform consistency on scribble data.

    The student sees a flipped input and is compared against the equally
    flipped teacher prediction of the original; supervision is partial
    cross entropy against the flipped scribbles.
    """
    cfg = state.config
    x, y = _batch_tensors(batch)
    axis = int(state.np_rng.integers(0, x.dim() - 2))
    x_t = torch.flip(x, dims=(2 + axis,))
    y_t = torch.flip(y, dims=(1 + axis,))

    pred = torch.softmax(state.nets[0](x_t), dim=1)
    sup = partial_ce_loss(pred, y_t, cfg.effective_ignore)

    stack = forward_stochastic(state.teacher, x, cfg.mc_passes, seed=_derived_seed(state))
    teacher_mean = torch.flip(stack.mean(dim=0), dims=(2 + axis,))
    uncertainty = -(teacher_mean * _log(teacher_mean)).sum(dim=1)
    k = pred.shape[1]
    gate = uncertainty < uamt_threshold(state.iteration, cfg.effective_ramp, k)
    pixel_sq = ((pred - teacher_mean) ** 2).mean(dim=1)
    cons = masked_mean(pixel_sq, gate)
    lam = _lambda(state)
    total = sup + lam * cons
    _apply(state, total)
    ema_update(state.nets[0], state.teacher, cfg.ema_alpha)
    return _components(total, supervised=sup, consistency=lam * cons)


def dmpls_step(state, batch):
    """Dual decoders supervised by a randomly mixed pseudo label.

    beta ~ U(0,1) mixes the two decoder outputs; the argmax of the mix
    supervises both decoders on unannotated pixels only.
    """
    cfg = state.config
    x, y = _batch_tensors(batch)
    out_a, out_b = state.nets[0].forward_dual(x)
    p1 = torch.softmax(out_a, dim=1)
    p2 = torch.softmax(out_b, dim=1)
    ignore = cfg.effective_ignore
    sup = partial_ce_loss(p1, y, ignore) + partial_ce_loss(p2, y, ignore)

    beta = float(torch.rand((), generator=state.torch_gen))
    pseudo = (beta * p1 + (1.0 - beta) * p2).argmax(dim=1).detach()
    unannotated = y == ignore
    oh = _one_hot(p1, pseudo)
    ce1 = masked_mean(-(oh * _log(p1)).sum(dim=1), unannotated)
    ce2 = masked_mean(-(oh * _log(p2)).sum(dim=1), unannotated)
    lam = _lambda(state)
    total = sup + lam * (ce1 + ce2)
    _apply(state, total)
    return _components(total, supervised=sup, pseudo=lam * (ce1 + ce2))


# ---------------------------------------------------------------------------
# noisy-label steps


def coteaching_step(state, batch, keep_ratio=None):
    """Each network trains on the peer's smallest-loss samples.

    Per-image cross entropies are ranked per network; the kept fraction
    R(t) = 1 - min(t/ramp, 1)*rho shrinks as training progresses.
    """
    x, y = _batch_tensors(batch)
    if keep_ratio is None:
        keep_ratio = _select_ratio(state)
    pred_a = torch.softmax(state.nets[0](x), dim=1)
    pred_b = torch.softmax(state.nets[1](x), dim=1)
    ce_a = _per_sample_ce(pred_a, y)
    ce_b = _per_sample_ce(pred_b, y)
    keep = int(math.ceil(keep_ratio * x.shape[0]))
    sel_a = select_small_loss(ce_a.detach().numpy(), keep)
    sel_b = select_small_loss(ce_b.detach().numpy(), keep)
    # the peer updates on the selecting network's subset
    loss_a = ce_a[sel_b].mean()
    loss_b = ce_b[sel_a].mean()
    total = loss_a + loss_b
    _apply(state, total)
    return _components(total, net_a=loss_a, net_b=loss_b)


def trinet_step(state, batch):
    """Each of three networks learns from its peers' agreed pseudo labels.

    Net i trains with cross entropy against argmax((p_j+p_k)/2) on pixels
    where the peers' argmaxes agree, restricted to its R(t)*B smallest-loss
    samples (losses measured against the given labels).
    """
    x, y = _batch_tensors(batch)
    preds = [torch.softmax(net(x), dim=1) for net in state.nets]
    keep = int(math.ceil(_select_ratio(state) * x.shape[0]))
    terms = {}
    total = x.sum() * 0.0
    for i in range(3):
        j, k = [m for m in range(3) if m != i]
        p_i, p_j, p_k = preds[i], preds[j], preds[k]
        pseudo = ((p_j + p_k) / 2.0).argmax(dim=1).detach()
        agree = (p_j.argmax(dim=1) == p_k.argmax(dim=1)).detach()
        sel = select_small_loss(_per_sample_ce(p_i, y).detach().numpy(), keep)
        sample_mask = torch.zeros(x.shape[0], dtype=torch.bool)
        sample_mask[sel] = True
        mask = agree & sample_mask.view((-1,) + (1,) * (agree.dim() - 1))
        ce_map = -(_one_hot(p_i, pseudo) * _log(p_i)).sum(dim=1)
        term = masked_mean(ce_map, mask)
        terms[f"net_{i}"] = term
        total = total + term
    _apply(state, total)
    return _components(total, **terms)


def dast_step(state, batch, rank_fraction=None):
    """Divergence-ranked selective training of a dual-branch network.

    Samples with the lowest symmetric KL between the branches are treated
    as clean (supervised by the given label); the rest take the detached
    cross-branch pseudo label. A ramped MSE keeps the branches consistent.
    """
    cfg = state.config
    if rank_fraction is None:
        rank_fraction = cfg.rank_fraction
    x, y = _batch_tensors(batch)
    out_a, out_b = state.nets[0].forward_dual(x)
    p1 = torch.softmax(out_a, dim=1)
    p2 = torch.softmax(out_b, dim=1)
    log1, log2 = _log(p1), _log(p2)
    sym_kl = ((p1 * (log1 - log2)).sum(dim=1) + (p2 * (log2 - log1)).sum(dim=1))
    divergence = sym_kl.mean(dim=tuple(range(1, sym_kl.dim())))
    n_clean = int(math.ceil(rank_fraction * x.shape[0]))
    clean = select_small_loss(divergence.detach().numpy(), n_clean)
    noisy = np.setdiff1d(np.arange(x.shape[0]), clean)

    clean_term = combined_loss(p1[clean], y[clean], cfg.loss) + combined_loss(
        p2[clean], y[clean], cfg.loss
    )
    if len(noisy):
        pseudo_1 = p2[noisy].argmax(dim=1).detach()
        pseudo_2 = p1[noisy].argmax(dim=1).detach()
        noisy_term = cross_entropy_loss(p1[noisy], pseudo_1) + cross_entropy_loss(
            p2[noisy], pseudo_2
        )
    else:
        noisy_term = x.sum() * 0.0
    lam = _lambda(state)
    cons = ((p1 - p2) ** 2).mean()
    total = clean_term + noisy_term + lam * cons
    _apply(state, total)
    return _components(
        total, clean=clean_term, noisy=noisy_term, consistency=lam * cons
    )


def clslsr_flag_and_relabel(pred_probs, noisy_labels, smoothing):
    """Flag likely label errors by per-class confidence and soften them.

    The threshold of class k is the mean predicted probability of k over
    pixels labeled k (1.0 for classes never labeled). A pixel is flagged
    when some class other than its given label reaches that class's
    threshold. Flagged pixels get
        (1 - smoothing) * onehot(given) + smoothing * blur3(onehot(argmax))
    where blur3 is a box average over a 3-wide spatial window; unflagged
    pixels keep their hard labels. Returns (soft labels (K, *spatial)
    float32, flag mask bool).
    """
    from scipy import ndimage

    probs = np.asarray(pred_probs, dtype=np.float64)
    labels = np.asarray(noisy_labels)
    k = probs.shape[0]
    if labels.shape != probs.shape[1:]:
        raise ValueError(
            f"label shape {labels.shape} does not match probs {probs.shape[1:]}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label ids outside [0, {k})")

    thresholds = np.ones(k)
    for cls in range(k):
        mask = labels == cls
        if mask.any():
            thresholds[cls] = probs[cls][mask].mean()

    exceeds = probs >= thresholds.reshape((k,) + (1,) * labels.ndim)
    exceeds[labels[None] == np.arange(k).reshape((k,) + (1,) * labels.ndim)] = False
    flagged = exceeds.any(axis=0)

    given_oh = np.eye(k, dtype=np.float64)[labels]          # (*spatial, K)
    given_oh = np.moveaxis(given_oh, -1, 0)
    pred_oh = np.eye(k, dtype=np.float64)[probs.argmax(0)]
    pred_oh = np.moveaxis(pred_oh, -1, 0)
    blurred = np.stack([
        ndimage.uniform_filter(pred_oh[c], size=3, mode="nearest") for c in range(k)
    ])
    soft = given_oh.copy()
    mix = (1.0 - smoothing) * given_oh + smoothing * blurred
    soft[:, flagged] = mix[:, flagged]
    return soft.astype(np.float32), flagged


# ---------------------------------------------------------------------------
# paradigm registry


@dataclass(frozen=True)
class ParadigmDef:
    step: object
    n_nets: int = 1
    variant: str = "plain"
    teacher: bool = False


def _wsl(reg):
    return lambda state, batch: wsl_reg_step(state, batch, reg)


PARADIGMS = {
    "fully_sup": ParadigmDef(supervised_step),
    "ssl_em": ParadigmDef(ssl_em_step),
    "ssl_mt": ParadigmDef(mean_teacher_step, teacher=True),
    "ssl_uamt": ParadigmDef(uamt_step, teacher=True),
    "ssl_urpc": ParadigmDef(urpc_step, variant="pyramid"),
    "ssl_cct": ParadigmDef(cct_step, variant="aux_decoders"),
    "ssl_cps": ParadigmDef(cps_step, n_nets=2),
    "wsl_em": ParadigmDef(_wsl("entropy")),
    "wsl_tv": ParadigmDef(_wsl("total_variation")),
    "wsl_ms": ParadigmDef(_wsl("mumford_shah")),
    "wsl_gatedcrf": ParadigmDef(_wsl("gated_crf")),
    "wsl_ustm": ParadigmDef(ustm_step, teacher=True),
    "wsl_dmpls": ParadigmDef(dmpls_step, variant="dual_decoder"),
    "nll_robustloss": ParadigmDef(supervised_step),
    "nll_coteaching": ParadigmDef(coteaching_step, n_nets=2),
    "nll_clslsr": ParadigmDef(None),     # two-stage, orchestrated by run_training
    "nll_trinet": ParadigmDef(trinet_step, n_nets=3),
    "nll_dast": ParadigmDef(dast_step, variant="dual_decoder"),
}


def resolve_network_spec(config):
    """The network spec with the variant the paradigm requires."""
    if config.network is None:
        raise ConfigError("AgentConfig.network must be set before training")
    entry = PARADIGMS[config.paradigm]
    if config.network.variant != entry.variant:
        return replace(config.network, variant=entry.variant)
    return config.network


def init_state(config):
    """Networks, optimizers, schedulers and RNG streams for a fresh run."""
    entry = PARADIGMS[config.paradigm]
    spec = resolve_network_spec(config)
    nets = [build_network(spec, seed=config.seed + i) for i in range(entry.n_nets)]
    optimizers = [
        torch.optim.Adam(net.parameters(), lr=config.base_lr) for net in nets
    ]
    schedulers = [
        torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt, mode="max", factor=config.lr_factor, patience=config.lr_patience
        )
        for opt in optimizers
    ]
    teacher = clone_network(nets[0]) if entry.teacher else None
    gen = torch.Generator()
    gen.manual_seed(int(config.seed))
    return TrainState(
        config=config,
        nets=nets,
        optimizers=optimizers,
        schedulers=schedulers,
        teacher=teacher,
        np_rng=np.random.default_rng(config.seed),
        torch_gen=gen,
    )


# ---------------------------------------------------------------------------
# validation and the training loop


def _mean_fg_dice(pred_ids, gt_ids, num_classes):
    scores = []
    for cls in range(1, num_classes):
        scores.append(overlap_metrics(pred_ids == cls, gt_ids == cls)["dice"])
    return float(np.mean(scores)) if scores else 1.0


def _checkpoint_group(state):
    group = {f"net{i}": net for i, net in enumerate(state.nets)}
    if state.teacher is not None:
        group["teacher"] = state.teacher
    return group


def validate_and_checkpoint(state, val_set, metric="dice"):
    """Mean foreground Dice over the validation set; checkpoints latest/best.

    The latest checkpoint is rewritten on every call; best.ckpt only when
    the score strictly improves. Plateau schedulers consume the score.
    """
    n = len(val_set)
    if n == 0:
        raise EmptyStreamError("validation set is empty")
    if metric == "dice":
        metric_fn = _mean_fg_dice
    elif callable(metric):
        metric_fn = metric
    else:
        raise ValueError(f"unsupported metric {metric!r}")
    k = state.config.network.num_classes
    scores = []
    for i in range(n):
        sample = val_set.raw_sample(i) if hasattr(val_set, "raw_sample") else val_set[i]
        if sample.label is None:
            raise ValueError(f"validation sample '{sample.id}' has no label")
        probs = sliding_window_infer(state.nets[0], sample.image)
        pred = probs.argmax(axis=0)
        gt = np.asarray(sample.label.data)
        if gt.ndim == pred.ndim + 1 and gt.shape[0] == 1:
            gt = gt[0]
        scores.append(metric_fn(pred, gt, k))
    score = float(np.mean(scores))
    state.val_trace.append((state.iteration, score))

    ckpt_dir = state.config.checkpoint_dir
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
        save_checkpoint(
            os.path.join(ckpt_dir, "latest.ckpt"),
            _checkpoint_group(state),
            iteration=state.iteration,
            metric=score,
        )
    if score > state.best_metric:
        state.best_metric = score
        if ckpt_dir:
            best = os.path.join(ckpt_dir, "best.ckpt")
            save_checkpoint(
                best, _checkpoint_group(state), iteration=state.iteration, metric=score
            )
            state.best_checkpoint = best
    for sch in state.schedulers:
        sch.step(score)
    return state


def _maybe_validate(state, valid, step_index, last_validated):
    cfg = state.config
    if valid is None or len(valid) == 0:
        return last_validated
    if (step_index + 1) % cfg.validation_interval == 0:
        validate_and_checkpoint(state, valid)
        return state.iteration
    return last_validated


def run_training(config, datasets):
    """Run max_iterations steps of the configured paradigm.

    datasets is a mapping with "train" (labeled/scribbled/noisy), optional
    "valid" and, for semi-supervised paradigms, "unlabeled". Returns the
    final TrainState; the best checkpoint (by validation Dice) is kept on
    disk when checkpoint_dir is set.
    """
    entry = PARADIGMS.get(config.paradigm)
    if entry is None:
        raise ConfigError(
            f"unknown paradigm '{config.paradigm}'; known: {sorted(PARADIGMS)}"
        )
    if config.paradigm == "nll_clslsr":
        return _run_clslsr(config, datasets)

    train = datasets.get("train")
    if train is None or len(train) == 0:
        raise EmptyStreamError("no training data")
    valid = datasets.get("valid")
    unlabeled = datasets.get("unlabeled")
    if config.n_unlabeled > 0 and (unlabeled is None or len(unlabeled) == 0):
        raise EmptyStreamError("n_unlabeled > 0 but no unlabeled dataset given")

    state = init_state(config)
    labeled_stream = CyclingStream(train, seed=config.seed)
    unlabeled_stream = (
        CyclingStream(unlabeled, seed=config.seed + 1) if config.n_unlabeled > 0 else None
    )
    last_validated = -1
    for t in range(config.max_iterations):
        batch = aggregate_batch(
            labeled_stream, unlabeled_stream, config.n_labeled, config.n_unlabeled
        )
        comps = entry.step(state, batch)
        state.loss_trace.append(comps["total"])
        last_validated = _maybe_validate(state, valid, t, last_validated)
    if valid is not None and len(valid) and last_validated != state.iteration:
        validate_and_checkpoint(state, valid)
    return state


def _run_clslsr(config, datasets):
    """Two-stage training: fit, flag and soften suspect labels, refit.

    Stage 1 trains a network on the given labels for relabel_at
    iterations (max_iterations when unset), predicts every training case,
    and converts flagged pixels to soft labels. Stage 2 trains a fresh
    network on the softened maps with cross entropy.
    """
    train = datasets.get("train")
    if train is None or len(train) == 0:
        raise EmptyStreamError("no training data")
    valid = datasets.get("valid")

    state = init_state(config)
    stream = CyclingStream(train, seed=config.seed)
    stage1 = config.relabel_at if config.relabel_at > 0 else config.max_iterations
    for _ in range(stage1):
        batch = aggregate_batch(stream, None, config.n_labeled, 0)
        comps = supervised_step(state, batch)
        state.loss_trace.append(comps["total"])

    images, softs = [], []
    for i in range(len(train)):
        sample = train.raw_sample(i) if hasattr(train, "raw_sample") else train[i]
        probs = sliding_window_infer(state.nets[0], sample.image)
        lab = np.asarray(sample.label.data)
        if lab.ndim == probs.ndim and lab.shape[0] == 1:
            lab = lab[0]
        soft, _flags = clslsr_flag_and_relabel(probs, lab, config.smoothing)
        images.append(np.asarray(sample.image.data, dtype=np.float32))
        softs.append(soft)
    source = ArrayBatchSource(
        np.stack(images), np.stack(softs), batch_size=config.n_labeled, seed=config.seed + 2
    )

    spec = resolve_network_spec(config)
    net = build_network(spec, seed=config.seed + 101)
    opt = torch.optim.Adam(net.parameters(), lr=config.base_lr)
    state.nets = [net]
    state.optimizers = [opt]
    state.schedulers = [
        torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt, mode="max", factor=config.lr_factor, patience=config.lr_patience
        )
    ]
    last_validated = -1
    for t in range(config.max_iterations):
        comps = _soft_ce_step(state, source.next_batch())
        state.loss_trace.append(comps["total"])
        last_validated = _maybe_validate(state, valid, t, last_validated)
    if valid is not None and len(valid) and last_validated != state.iteration:
        validate_and_checkpoint(state, valid)
    return state
