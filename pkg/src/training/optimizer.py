"""SGD with momentum over named parameter arrays."""
from typing import Dict, Tuple

import numpy as np

from errors import ShapeError

Arrays = Dict[str, np.ndarray]


def sgd_update(
    params: Arrays, grads: Arrays, learning_rate: float, sgd_momentum: float, state: Arrays
) -> Tuple[Arrays, Arrays]:
    """
    One momentum step: v <- momentum * v + grad; theta <- theta - learning_rate * v.

    Parameters without a gradient in `grads` keep both their value and their
    velocity. Inputs are not modified.

    Args:
        params: Current parameters
        grads: Gradients for the parameters that took part in this step
        learning_rate: Step size
        sgd_momentum: Velocity decay factor
        state: Velocities from the previous step (missing entries start at zero)

    Returns:
        Tuple of (updated params, updated velocities)

    Raises:
        ShapeError: If a gradient does not match its parameter
    """
    new_params = dict(params)
    new_state = dict(state)
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"Gradient '{name}' has no matching parameter")
        theta = params[name]
        if grad.shape != theta.shape:
            raise ShapeError(f"Gradient '{name}' shape {grad.shape} != parameter shape {theta.shape}")
        velocity = state.get(name)
        if velocity is None:
            velocity = np.zeros_like(theta)
        velocity = (sgd_momentum * velocity + grad).astype(theta.dtype)
        new_state[name] = velocity
        new_params[name] = (theta - learning_rate * velocity).astype(theta.dtype)
    return new_params, new_state
