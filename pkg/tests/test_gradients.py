"""Central finite differences against autograd, float64, inputs of at most 8x8."""

import pytest
import torch

from lvsnet.metrics import DiceLossParams, dice_loss
from lvsnet.model import FMAM, SFRB, DecoderStage, Stem

from conftest import small_config

H = 1e-6
TOL = 1e-4


def numeric_grad(f, tensors, h=H):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``tensors``."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


def check(f, tensors):
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [t.grad.clone() for t in tensors]
    numeric = numeric_grad(f, tensors)
    assert all(g.abs().max() > 0 for g in analytic)
    err = relative_error(analytic, numeric)
    assert err < TOL, f"relative error {err:.3e}"
    return err


def _weights(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _module_check(module, inputs, seed=0):
    module = module.double()
    outs = module(*inputs)
    out = outs[1] if isinstance(outs, tuple) else outs
    w = _weights(out.shape, seed)

    def loss():
        o = module(*inputs)
        o = o[1] if isinstance(o, tuple) else o
        return (o * w).mean()

    params = [p for p in module.parameters() if p.requires_grad]
    return check(loss, list(inputs) + params)


def _input(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64).requires_grad_()


def test_dice_loss_gradient():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(2, 4, 4, generator=g, dtype=torch.float64).requires_grad_()
    truth = (torch.rand(2, 4, 4, generator=g) > 0.5).double()
    params = DiceLossParams(class_weights=(0.3, 0.7))
    check(lambda: dice_loss(pred, truth, params), [pred])


def test_dice_loss_gradient_batched():
    g = torch.Generator().manual_seed(1)
    pred = torch.rand(2, 2, 4, 4, generator=g, dtype=torch.float64).requires_grad_()
    truth = (torch.rand(2, 2, 4, 4, generator=g) > 0.5).double()
    check(lambda: dice_loss(pred, truth), [pred])


def test_stem_gradient():
    torch.manual_seed(0)
    cfg = small_config(input_height=8, input_width=8)
    _module_check(Stem(cfg), [_input(1, 3, 8, 8)])


@pytest.mark.parametrize("activation", ["gelu", "relu"])
def test_fmam_gradient(activation):
    torch.manual_seed(1)
    _module_check(FMAM(4, small_config(fmam_activation=activation)), [_input(2, 4, 8, 8, seed=1)])


@pytest.mark.parametrize("conv", ["full", "separable", "depthwise"])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_sfrb_gradient(conv, mode):
    torch.manual_seed(2)
    m = SFRB(4, small_config(sfrb_conv=conv))
    m.train(mode == "train")
    _module_check(m, [_input(2, 4, 8, 8, seed=2)])


def test_decoder_stage_gradient():
    torch.manual_seed(3)
    dec = DecoderStage(8, 4, small_config()).train()
    _module_check(dec, [_input(2, 8, 4, 4, seed=3), _input(2, 4, 8, 8, seed=4)])


def test_oracle_detects_wrong_gradient():
    x = _input(3, 3)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            ctx.save_for_backward(a)
            return (a**2).sum()

        @staticmethod
        def backward(ctx, grad):
            (a,) = ctx.saved_tensors
            return grad * 2.1 * a

    with pytest.raises(AssertionError):
        check(lambda: Wrong.apply(x), [x])
