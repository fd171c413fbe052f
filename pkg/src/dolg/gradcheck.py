"""Central finite differences for checking autograd gradients at float64."""

import torch


def numeric_grad(fn, tensor, h=1e-6):
    """d fn() / d tensor by central differences, perturbing ``tensor`` in place."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    scale = max(a.norm().item(), b.norm().item())
    if scale == 0:
        return 0.0
    return (a - b).norm().item() / scale


def max_gradient_error(fn, tensors, h=1e-6):
    """Largest relative error between autograd and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    return max(relative_error(a, numeric_grad(fn, t, h)) for a, t in zip(analytic, tensors))
