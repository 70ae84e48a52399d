"""Independent reference implementations shared by the test modules."""

import torch

from tvsr.training import batch_loss


def fd_gradcheck(model, inputs, targets, eps=1e-6, rtol=1e-3, atol=1e-8):
    """Central differences on every parameter element vs autograd; returns the worst relative error."""
    loss = batch_loss(model, inputs, targets)
    model.zero_grad()
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            analytic = p.grad.view(-1).clone()
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = batch_loss(model, inputs, targets).item()
                flat[i] = orig - eps
                down = batch_loss(model, inputs, targets).item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[i].item()
                err = abs(a - numeric)
                assert err <= rtol * max(abs(a), abs(numeric)) + atol, (name, i, a, numeric)
                worst = max(worst, err / max(abs(a), abs(numeric), 1e-12))
    return worst
