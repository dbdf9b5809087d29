from collections.abc import Callable, Iterable

import torch


def finite_difference_error(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Iterable[torch.Tensor],
    step: float = 1e-6,
) -> float:
    """
    Norm-relative error between autograd gradients and central differences
    over every element of every parameter. Parameters must be float64 leaves.
    """
    parameters = list(parameters)
    for parameter in parameters:
        parameter.grad = None
    loss_fn().backward()
    analytic = torch.cat([parameter.grad.detach().flatten().clone() for parameter in parameters])

    numeric = []
    with torch.no_grad():
        for parameter in parameters:
            flat = parameter.view(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + step
                upper = loss_fn().item()
                flat[index] = original - step
                lower = loss_fn().item()
                flat[index] = original
                numeric.append((upper - lower) / (2 * step))
    numeric = torch.tensor(numeric, dtype=torch.float64)

    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale
