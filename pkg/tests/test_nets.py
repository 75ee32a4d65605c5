"""Network construction, variants, stochastic forwards, checkpoints."""

import numpy as np
import pytest
import torch

from segkit.errors import ShapeError
from segkit.nets import (
    NetworkSpec,
    build_network,
    clone_network,
    forward_stochastic,
    load_checkpoint,
    load_into,
    save_checkpoint,
)


def _spec(**kw):
    base = dict(dims=2, in_channels=1, num_classes=3, feature_widths=(4, 8))
    base.update(kw)
    return NetworkSpec(**base)


def _input(b=2, c=1, size=(8, 8), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((b, c) + size, generator=g)


# ---------------------------------------------------------------------------
# spec validation


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(dims=4)
    with pytest.raises(ValueError):
        _spec(num_classes=1)
    with pytest.raises(ValueError):
        _spec(feature_widths=(8,))
    with pytest.raises(ValueError):
        _spec(dropout_rates=(0.1,))
    with pytest.raises(ValueError):
        _spec(dropout_rates=(0.5, 1.0))
    with pytest.raises(ValueError):
        _spec(variant="transformer")


def test_spec_spatial_multiple():
    assert _spec().spatial_multiple == 2
    assert _spec(feature_widths=(4, 8, 16, 32)).spatial_multiple == 8
    assert _spec().levels == 2


def test_spec_default_dropout_matches_levels():
    s = _spec(feature_widths=(4, 8, 16))
    assert s.dropout_rates == (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# forward shapes


def test_plain_forward_shape_2d():
    net = build_network(_spec(), seed=0)
    out = net(_input())
    assert out.shape == (2, 3, 8, 8)


def test_plain_forward_shape_3d():
    net = build_network(_spec(dims=3), seed=0)
    out = net(_input(size=(4, 8, 8)))
    assert out.shape == (2, 3, 4, 8, 8)


def test_pyramid_scales_halve():
    net = build_network(_spec(feature_widths=(4, 8, 16), variant="pyramid"), seed=1)
    outs = net.forward_pyramid(_input(size=(16, 16)))
    assert [tuple(o.shape) for o in outs] == [(2, 3, 16, 16), (2, 3, 8, 8)]


def test_dual_decoder_two_heads_differ():
    net = build_network(_spec(variant="dual_decoder"), seed=2)
    net.eval()
    a, b = net.forward_dual(_input())
    assert a.shape == b.shape == (2, 3, 8, 8)
    assert not torch.allclose(a, b)


def test_aux_decoder_count_and_shape():
    net = build_network(_spec(variant="aux_decoders", num_aux_decoders=3), seed=3)
    net.eval()
    main, aux = net.forward_aux(_input(), seed=0)
    assert main.shape == (2, 3, 8, 8)
    assert len(aux) == 3
    assert all(a.shape == main.shape for a in aux)


def test_variant_forwards_guarded():
    net = build_network(_spec(), seed=0)
    with pytest.raises(ValueError):
        net.forward_pyramid(_input())
    with pytest.raises(ValueError):
        net.forward_dual(_input())
    with pytest.raises(ValueError):
        net.forward_aux(_input())


def test_input_validation():
    net = build_network(_spec(feature_widths=(4, 8, 16)), seed=0)
    with pytest.raises(ShapeError, match="divisible"):
        net(_input(size=(10, 12)))
    with pytest.raises(ShapeError, match="channels"):
        net(_input(c=2, size=(8, 8)))
    with pytest.raises(ShapeError):
        net(torch.randn(8, 8))


# ---------------------------------------------------------------------------
# determinism


def test_build_deterministic_and_rng_isolated():
    before = torch.randn(3)
    torch.manual_seed(1234)
    probe_a = torch.randn(4)
    torch.manual_seed(1234)
    net_a = build_network(_spec(), seed=7)
    probe_b = torch.randn(4)
    net_b = build_network(_spec(), seed=7)
    net_c = build_network(_spec(), seed=8)
    # same seed, same weights
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert torch.equal(pa, pb)
    # different seed differs somewhere
    assert any(
        not torch.equal(pa, pc) for pa, pc in zip(net_a.parameters(), net_c.parameters())
    )
    # building did not consume global RNG draws
    assert torch.equal(probe_a, probe_b)
    del before


def test_eval_forward_deterministic():
    net = build_network(_spec(), seed=0)
    net.eval()
    x = _input(seed=5)
    with torch.no_grad():
        assert torch.equal(net(x), net(x))


def test_forward_stochastic_shape_and_determinism():
    spec = _spec(dropout_rates=(0.3, 0.3))
    net = build_network(spec, seed=4)
    x = _input(seed=6)
    probs = forward_stochastic(net, x, passes=3, seed=11)
    again = forward_stochastic(net, x, passes=3, seed=11)
    other = forward_stochastic(net, x, passes=3, seed=12)
    assert probs.shape == (3, 2, 3, 8, 8)
    assert torch.equal(probs, again)
    assert not torch.equal(probs, other)
    # per-pass softmax maps
    sums = probs.sum(dim=2)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    # dropout actually perturbs the passes
    assert float((probs[0] - probs[1]).abs().max()) > 0


def test_forward_stochastic_no_dropout_equals_plain_eval():
    net = build_network(_spec(), seed=4)
    x = _input(seed=7)
    probs = forward_stochastic(net, x, passes=3, seed=0)
    net.eval()
    with torch.no_grad():
        plain = torch.softmax(net(x), dim=1)
    for t in range(3):
        assert torch.allclose(probs[t], plain, atol=1e-6)


def test_forward_stochastic_restores_mode_and_validates():
    net = build_network(_spec(dropout_rates=(0.2, 0.2)), seed=0)
    net.train()
    forward_stochastic(net, _input(), passes=1, seed=0)
    assert net.training
    net.eval()
    forward_stochastic(net, _input(), passes=1, seed=0)
    assert not net.training
    with pytest.raises(ValueError):
        forward_stochastic(net, _input(), passes=0, seed=0)


def test_clone_network_independent_and_frozen():
    net = build_network(_spec(), seed=9)
    twin = clone_network(net)
    assert all(not p.requires_grad for p in twin.parameters())
    with torch.no_grad():
        next(net.parameters()).add_(1.0)
    pa = next(net.parameters())
    pb = next(twin.parameters())
    assert not torch.equal(pa, pb)


def test_aux_decoders_with_copied_weights_and_no_perturbation_match_main():
    spec = _spec(
        variant="aux_decoders",
        num_aux_decoders=1,
        aux_noise_amplitude=0.0,
        aux_dropout_rate=0.0,
    )
    net = build_network(spec, seed=10)
    net.aux_decoders[0].load_state_dict(net.decoder.state_dict())
    net.aux_heads[0].load_state_dict(net.head.state_dict())
    net.eval()
    with torch.no_grad():
        main, aux = net.forward_aux(_input(seed=8), seed=3)
    assert torch.allclose(aux[0], main, atol=1e-6)


def test_aux_perturbation_reproducible_by_seed():
    net = build_network(_spec(variant="aux_decoders"), seed=11)
    net.eval()
    x = _input(seed=9)
    with torch.no_grad():
        _, aux_a = net.forward_aux(x, seed=21)
        _, aux_b = net.forward_aux(x, seed=21)
        _, aux_c = net.forward_aux(x, seed=22)
    assert torch.equal(aux_a[0], aux_b[0])
    assert not torch.equal(aux_a[0], aux_c[0])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_bytes_deterministic(tmp_path):
    net = build_network(_spec(), seed=12)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, net, iteration=5, metric=0.5)
    save_checkpoint(p2, net, iteration=5, metric=0.5)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_round_trip(tmp_path):
    net = build_network(_spec(), seed=13)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, iteration=42, metric=0.875)
    other = build_network(_spec(), seed=14)
    groups, meta = load_checkpoint(path, net=other)
    assert meta == {"iteration": 42, "metric": 0.875}
    assert set(groups) == {"net0"}
    x = _input(seed=10)
    net.eval(), other.eval()
    with torch.no_grad():
        assert torch.allclose(net(x), other(x), atol=1e-6)


def test_checkpoint_multi_group(tmp_path):
    a = build_network(_spec(), seed=15)
    b = build_network(_spec(), seed=16)
    path = tmp_path / "pair.ckpt"
    save_checkpoint(path, {"net0": a, "teacher": b}, iteration=1)
    groups, _ = load_checkpoint(path)
    assert set(groups) == {"net0", "teacher"}
    fresh = build_network(_spec(), seed=17)
    load_into(fresh, groups["teacher"])
    x = _input(seed=11)
    b.eval(), fresh.eval()
    with torch.no_grad():
        assert torch.allclose(b(x), fresh(x), atol=1e-6)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(bad)


def test_load_into_rejects_mismatched_architecture(tmp_path):
    small = build_network(_spec(), seed=18)
    big = build_network(_spec(feature_widths=(4, 8, 16)), seed=19)
    path = tmp_path / "small.ckpt"
    save_checkpoint(path, small)
    with pytest.raises(ValueError, match="state mismatch"):
        load_checkpoint(path, net=big)


def test_checkpoint_preserves_zero_dim_buffers(tmp_path):
    # batchnorm tracks num_batches_tracked as a 0-dim int64 tensor; the
    # format must round-trip such buffers even though SegNet has none
    net = torch.nn.Sequential(torch.nn.Conv2d(1, 4, 3, padding=1), torch.nn.BatchNorm2d(4))
    net.train()
    net(_input(seed=12))
    path = tmp_path / "tracked.ckpt"
    save_checkpoint(path, net)
    groups, _ = load_checkpoint(path)
    tracked = [v for k, v in groups["net0"].items() if k.endswith("num_batches_tracked")]
    assert tracked and all(np.asarray(t).shape == () for t in tracked)
    assert all(int(t) == 1 for t in tracked)
