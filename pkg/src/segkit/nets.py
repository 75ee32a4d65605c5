"""Encoder-decoder segmentation networks (2D and 3D) with variants.

One SegNet covers four variants selected by NetworkSpec.variant:
    plain          encoder + single decoder + 1x1 head
    pyramid        extra 1x1 heads on every decoder stage (multi-scale logits)
    dual_decoder   two independently parameterized decoders on a shared encoder
    aux_decoders   auxiliary decoders fed a perturbed bottleneck (noise + feature dropout)

All forwards return logits; callers apply softmax. Checkpoints use a flat
deterministic format (JSON manifest + raw little-endian arrays) so identical
training runs produce byte-identical files.
"""

import copy
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class NetworkSpec:
    """Architecture description consumed by build_network."""

    dims: int = 2
    in_channels: int = 1
    num_classes: int = 2
    feature_widths: tuple = None
    dropout_rates: tuple = None
    variant: str = "plain"
    num_aux_decoders: int = 2
    aux_noise_amplitude: float = 0.3
    aux_dropout_rate: float = 0.5

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_widths is None:
            self.feature_widths = (16, 32, 64, 128, 256) if self.dims == 2 else (16, 32, 64, 128)
        self.feature_widths = tuple(int(w) for w in self.feature_widths)
        if len(self.feature_widths) < 2:
            raise ValueError("need at least two resolution levels")
        if self.dropout_rates is None:
            self.dropout_rates = (0.0,) * len(self.feature_widths)
        self.dropout_rates = tuple(float(r) for r in self.dropout_rates)
        if len(self.dropout_rates) != len(self.feature_widths):
            raise ValueError("dropout_rates must match feature_widths in length")
        if any(not 0 <= r < 1 for r in self.dropout_rates):
            raise ValueError("dropout rates must be in [0, 1)")
        if self.variant not in ("plain", "pyramid", "dual_decoder", "aux_decoders"):
            raise ValueError(f"unknown variant '{self.variant}'")

    @property
    def levels(self):
        return len(self.feature_widths)

    @property
    def spatial_multiple(self):
        return 2 ** (self.levels - 1)


def _conv_mod(dims):
    return nn.Conv2d if dims == 2 else nn.Conv3d


def _norm_mod(dims):
    # group norm keeps each sample's normalization independent of its batch
    # mates, so mixed labeled/unlabeled batches see the same function as
    # labeled-only ones and checkpoints carry no batch statistics
    def make(channels):
        groups = 4 if channels % 4 == 0 else 1
        return nn.GroupNorm(groups, channels)

    return make


def _drop_mod(dims):
    return nn.Dropout2d if dims == 2 else nn.Dropout3d


class ConvBlock(nn.Module):
    """Two 3x3 conv-norm-lrelu units with optional channel dropout between."""

    def __init__(self, cin, cout, dims, dropout=0.0):
        super().__init__()
        Conv, Norm, Drop = _conv_mod(dims), _norm_mod(dims), _drop_mod(dims)
        layers = [Conv(cin, cout, 3, padding=1), Norm(cout), nn.LeakyReLU(0.01, inplace=True)]
        if dropout > 0:
            layers.append(Drop(dropout))
        layers += [Conv(cout, cout, 3, padding=1), Norm(cout), nn.LeakyReLU(0.01, inplace=True)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class Encoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        widths = spec.feature_widths
        self.blocks = nn.ModuleList()
        cin = spec.in_channels
        for w, p in zip(widths, spec.dropout_rates):
            self.blocks.append(ConvBlock(cin, w, spec.dims, p))
            cin = w
        self.pool = nn.MaxPool2d(2) if spec.dims == 2 else nn.MaxPool3d(2)

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Upsample + skip-concat decoder; keeps per-stage features for pyramid heads."""

    def __init__(self, spec):
        super().__init__()
        widths = spec.feature_widths
        self.dims = spec.dims
        self.reduce = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.reduce.append(_conv_mod(spec.dims)(widths[i], widths[i - 1], 1))
            self.blocks.append(ConvBlock(widths[i - 1] * 2, widths[i - 1], spec.dims, 0.0))

    def forward(self, feats):
        mode = "bilinear" if self.dims == 2 else "trilinear"
        x = feats[-1]
        stages = []
        for k, (red, block) in enumerate(zip(self.reduce, self.blocks)):
            skip = feats[len(feats) - 2 - k]
            x = F.interpolate(x, size=skip.shape[2:], mode=mode, align_corners=False)
            x = block(torch.cat([skip, red(x)], dim=1))
            stages.append(x)
        return stages        # coarsest first, full resolution last


class SegNet(nn.Module):
    """Configurable U-shaped segmentation network."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        Conv = _conv_mod(spec.dims)
        w0 = spec.feature_widths[0]
        k = spec.num_classes
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)
        self.head = Conv(w0, k, 1)
        if spec.variant == "pyramid":
            # 1x1 heads for the sub-full-resolution decoder stages, finest first;
            # the full-resolution scale reuses the main head
            self.stage_heads = nn.ModuleList(
                Conv(w, k, 1) for w in spec.feature_widths[1:-1]
            )
        if spec.variant == "dual_decoder":
            self.decoder_b = Decoder(spec)
            self.head_b = Conv(w0, k, 1)
        if spec.variant == "aux_decoders":
            self.aux_decoders = nn.ModuleList(Decoder(spec) for _ in range(spec.num_aux_decoders))
            self.aux_heads = nn.ModuleList(Conv(w0, k, 1) for _ in range(spec.num_aux_decoders))

    def check_input(self, x):
        spec = self.spec
        if x.dim() != spec.dims + 2:
            raise ShapeError(
                f"expected {spec.dims + 2}D input (B, C, *spatial), got shape {tuple(x.shape)}"
            )
        if x.shape[1] != spec.in_channels:
            raise ShapeError(f"expected {spec.in_channels} channels, got {x.shape[1]}")
        m = spec.spatial_multiple
        for extent in x.shape[2:]:
            if extent % m != 0:
                raise ShapeError(
                    f"spatial extents must be divisible by {m} for {spec.levels} levels, "
                    f"got {tuple(x.shape[2:])}"
                )

    def forward(self, x):
        self.check_input(x)
        feats = self.encoder(x)
        return self.head(self.decoder(feats)[-1])

    def forward_pyramid(self, x):
        """Multi-scale logits; entry s has spatial extents divided by 2^s."""
        if self.spec.variant != "pyramid":
            raise ValueError("forward_pyramid requires variant='pyramid'")
        self.check_input(x)
        feats = self.encoder(x)
        stages = self.decoder(feats)
        outs = [self.head(stages[-1])]
        # stages run coarsest -> finest; walk back down for scales 1/2, 1/4, ...
        for stage, head in zip(reversed(stages[:-1]), self.stage_heads):
            outs.append(head(stage))
        return outs

    def forward_dual(self, x):
        """Two logit maps from the shared encoder's independent decoders."""
        if self.spec.variant != "dual_decoder":
            raise ValueError("forward_dual requires variant='dual_decoder'")
        self.check_input(x)
        feats = self.encoder(x)
        out_a = self.head(self.decoder(feats)[-1])
        out_b = self.head_b(self.decoder_b(feats)[-1])
        return out_a, out_b

    def forward_aux(self, x, seed=None):
        """Main logits plus auxiliary logits from perturbed bottlenecks.

        Each auxiliary decoder sees the bottleneck with additive uniform
        noise and channel dropout, drawn from a generator seeded by `seed`
        (or the global RNG when None), so a fixed seed is reproducible.
        """
        if self.spec.variant != "aux_decoders":
            raise ValueError("forward_aux requires variant='aux_decoders'")
        self.check_input(x)
        spec = self.spec
        feats = self.encoder(x)
        main = self.head(self.decoder(feats)[-1])
        gen = None
        if seed is not None:
            gen = torch.Generator(device=feats[-1].device)
            gen.manual_seed(int(seed))
        aux_outs = []
        bottom = feats[-1]
        for dec, head in zip(self.aux_decoders, self.aux_heads):
            z = bottom
            if spec.aux_noise_amplitude > 0:
                noise = torch.rand(z.shape, generator=gen, device=z.device, dtype=z.dtype)
                z = z + (noise * 2.0 - 1.0) * spec.aux_noise_amplitude
            p = spec.aux_dropout_rate
            if p > 0:
                shape = (z.shape[0], z.shape[1]) + (1,) * (z.dim() - 2)
                keep = (torch.rand(shape, generator=gen, device=z.device) >= p).to(z.dtype)
                z = z * keep / (1.0 - p)
            aux_outs.append(head(dec(feats[:-1] + [z])[-1]))
        return main, aux_outs


def build_network(spec, seed=0):
    """Construct a SegNet with weights drawn from a seeded fork of the RNG.

    Identical spec and seed give parameter-identical networks without
    disturbing the caller's global RNG state.
    """
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        net = SegNet(spec)
    return net


def clone_network(net):
    """Structural + parameter copy with gradients off (used for EMA teachers)."""
    twin = copy.deepcopy(net)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def forward_stochastic(net, x, passes, seed=0):
    """T softmax maps with dropout forced on, stacked as (T, B, K, *spatial).

    Runs under a forked RNG seeded by `seed`, so results are deterministic
    and the caller's RNG is untouched. Network modes are restored afterward.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    was_training = net.training
    net.eval()
    dropouts = [m for m in net.modules() if isinstance(m, (nn.Dropout, nn.Dropout2d, nn.Dropout3d))]
    for m in dropouts:
        m.train()
    try:
        outs = []
        with torch.no_grad(), torch.random.fork_rng():
            torch.manual_seed(int(seed))
            for _ in range(passes):
                outs.append(torch.softmax(net(x), dim=1))
    finally:
        net.train(was_training)
    return torch.stack(outs)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SEGKITCK1\n"


def _state_groups(obj):
    if isinstance(obj, nn.Module):
        return {"net0": obj.state_dict()}
    return {name: (m.state_dict() if isinstance(m, nn.Module) else m) for name, m in obj.items()}


def save_checkpoint(path, nets, iteration=0, metric=None):
    """Write one or more state dicts to a byte-deterministic checkpoint.

    Args:
        nets: a module, or {group_name: module_or_state_dict}.
    """
    groups = _state_groups(nets)
    manifest = {"iteration": int(iteration), "metric": metric, "groups": {}}
    blobs = io.BytesIO()
    for gname in sorted(groups):
        entries = []
        sd = groups[gname]
        for tname in sorted(sd):
            # asarray keeps 0-dim counters 0-dim (ascontiguousarray would not)
            arr = np.asarray(sd[tname].detach().cpu().numpy(), order="C")
            entries.append({"name": tname, "dtype": arr.dtype.name, "shape": list(arr.shape)})
            blobs.write(arr.tobytes(order="C"))
        manifest["groups"][gname] = entries
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    os.makedirs(os.path.dirname(os.path.abspath(str(path))), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        f.write(blobs.getvalue())


def load_checkpoint(path, net=None, group="net0"):
    """Read a checkpoint; optionally load one group into a module.

    Returns (groups, meta) where groups maps group name -> {tensor name:
    ndarray} and meta carries iteration/metric.
    """
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a segkit checkpoint")
        head_len = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(head_len).decode())
        groups = {}
        for gname in sorted(manifest["groups"]):
            tensors = {}
            for entry in manifest["groups"][gname]:
                dtype = np.dtype(entry["dtype"])
                count = int(np.prod(entry["shape"])) if entry["shape"] else 1
                buf = f.read(count * dtype.itemsize)
                tensors[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
            groups[gname] = tensors
    meta = {"iteration": manifest["iteration"], "metric": manifest["metric"]}
    if net is not None:
        load_into(net, groups[group])
    return groups, meta


def load_into(net, tensors):
    """Copy named arrays into a module's state dict; names must match."""
    sd = net.state_dict()
    if set(sd) != set(tensors):
        missing = set(sd) - set(tensors)
        extra = set(tensors) - set(sd)
        raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    with torch.no_grad():
        for name, param in sd.items():
            param.copy_(torch.from_numpy(np.asarray(tensors[name])).to(param.dtype))


# thin functional aliases matching the op naming used elsewhere
def forward(net, x):
    return net(x)


def forward_pyramid(net, x):
    return net.forward_pyramid(x)


def forward_dual(net, x):
    return net.forward_dual(x)


def forward_aux(net, x, seed=None):
    return net.forward_aux(x, seed=seed)
