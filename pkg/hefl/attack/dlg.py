"""
Gradient inversion against observed model updates.

The attacker sees the broadcast model ``w^{t-1}`` and a client's reply
``w^t``. Under a single local SGD step the client's gradient is
``(w^{t-1} - w^t) / lr``; positions hidden by encryption are not observable
and never enter the matching loss. A dummy image and dummy label logits are
then optimised until their gradient at ``w^{t-1}`` matches the inferred one.
When the output bias gradient is visible the label is recovered from its
sign pattern first and only the image is optimised.
"""

from typing import Optional, Tuple

import numpy as np
import pydantic
from loguru import logger
from scipy import optimize
from scipy.special import softmax

from hefl.errors import AttackError, ShapeError
from hefl.nncore import Gradient, ModelParams, ModelSpec, backward, forward, sgd_step

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
OPTIMIZERS = ("lbfgs", "adam")
LABEL_LOGIT = 20.0


class AttackTarget(pydantic.BaseModel):
    spec: ModelSpec
    previous: np.ndarray = pydantic.Field(..., description="Broadcast parameters w^{t-1}.")
    observed: np.ndarray = pydantic.Field(..., description="Client reply w^t as seen by the attacker.")
    observable: np.ndarray = pydantic.Field(..., description="True where the reply was sent in plaintext.")
    lr: float

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @pydantic.root_validator(skip_on_failure=True)
    def _check_lengths(cls, values):
        n = values["spec"].param_count
        for name in ("previous", "observed", "observable"):
            if len(values[name]) != n:
                raise ValueError(f"{name} has length {len(values[name])}, expected {n}")
        return values

    @classmethod
    def from_round(
        cls,
        spec: ModelSpec,
        previous: np.ndarray,
        observed: np.ndarray,
        mask_bits: Optional[np.ndarray],
        is_authentic: bool,
        lr: float,
    ) -> "AttackTarget":
        """Authentic replies hide the masked positions; synthetic replies are fully visible."""
        n = len(previous)
        if is_authentic and mask_bits is not None:
            observable = ~np.asarray(mask_bits, dtype=bool)
        else:
            observable = np.ones(n, dtype=bool)
        return cls(
            spec=spec,
            previous=np.asarray(previous, dtype=np.float64),
            observed=np.asarray(observed, dtype=np.float64),
            observable=observable,
            lr=lr,
        )

    @property
    def params(self) -> ModelParams:
        return ModelParams(flat=self.previous, layout=self.spec.param_layout())


class AttackResult(pydantic.BaseModel):
    image: np.ndarray
    label_distribution: np.ndarray
    matching_loss: float
    iterations: int
    observed_coordinates: int
    diverged: bool = False
    degenerate: bool = pydantic.Field(False, description="No observable coordinate; image is the random initialisation.")
    label_inferred: bool = pydantic.Field(False, description="Label read off the output bias gradient and held fixed.")

    class Config:
        arbitrary_types_allowed = True

    @property
    def predicted_label(self) -> int:
        return int(np.argmax(self.label_distribution))


def infer_gradient(target: AttackTarget) -> Gradient:
    """
    ``(w^{t-1} - w^t) / lr`` on observable positions, zero elsewhere.

    Raises:
        AttackError: When the learning rate is not positive.
    """
    if target.lr <= 0:
        raise AttackError(f"learning rate must be positive, got {target.lr}")
    flat = np.where(target.observable, (target.previous - target.observed) / target.lr, 0.0)
    return Gradient(flat=flat, observed=target.observable.copy())


def victim_update(spec: ModelSpec, previous: np.ndarray, image: np.ndarray, label: int, lr: float) -> np.ndarray:
    """Parameters after one SGD step on a single labelled image."""
    params = ModelParams(flat=previous, layout=spec.param_layout())
    _, cache = forward(spec, params, image[None])
    _, grad = backward(spec, params, cache, np.array([label]))
    return sgd_step(params, grad, lr).flat


def _input_label_grads(spec: ModelSpec, flat: np.ndarray, layout, x: np.ndarray, labels: np.ndarray):
    params = ModelParams(flat=flat, layout=layout)
    _, cache = forward(spec, params, x)
    _, grad = backward(spec, params, cache, labels)
    return grad


def matching_objective(
    target: AttackTarget,
    g_hat: Gradient,
    x: np.ndarray,
    label_logits: np.ndarray,
    fd_step: float = 1e-4,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    ``D = sum over observable k of (g_k(x, y) - g_hat_k)**2`` with
    ``y = softmax(label_logits)``, and its gradients with respect to ``x`` and
    ``label_logits``.

    ``dD/dx = 2 d/dh [grad_x L(w + h v)]`` along ``v = g - g_hat`` restricted to
    observable positions; the directional derivative is taken by central
    differences of the input and label gradients.
    """
    if x.shape[1:] != tuple(target.spec.input_shape):
        raise ShapeError(f"dummy image has shape {x.shape}")
    layout = target.spec.param_layout()
    labels = softmax(label_logits, axis=1)
    grad = _input_label_grads(target.spec, target.previous, layout, x, labels)
    residual = np.where(target.observable, grad.flat - g_hat.flat, 0.0)
    loss = float(np.sum(residual * residual))
    if loss == 0.0:
        return 0.0, np.zeros_like(x), np.zeros_like(label_logits)

    h = fd_step / max(float(np.max(np.abs(residual))), 1e-12)
    plus = _input_label_grads(target.spec, target.previous + h * residual, layout, x, labels)
    minus = _input_label_grads(target.spec, target.previous - h * residual, layout, x, labels)
    grad_x = (plus.inputs - minus.inputs) / h
    grad_y = (plus.labels - minus.labels) / h
    # softmax Jacobian transpose applied row-wise
    grad_z = labels * (grad_y - np.sum(labels * grad_y, axis=1, keepdims=True))
    return loss, grad_x, grad_z


def infer_label(target: AttackTarget) -> Optional[int]:
    """
    Class of a single-image update read off the output-layer bias gradient
    ``softmax(logits) - onehot(y)``, whose only negative entry is the label.
    None when a bias position is hidden or no entry is negative.
    """
    slot = target.spec.param_layout()[-1]
    positions = slice(slot.offset, slot.offset + slot.length)
    if not target.observable[positions].all():
        return None
    bias = infer_gradient(target).flat[positions]
    label = int(np.argmin(bias))
    return label if bias[label] < 0 else None


class _BestIterate:
    def __init__(self, x: np.ndarray, z: np.ndarray):
        self.loss, self.x, self.z = np.inf, x.copy(), z.copy()

    def offer(self, loss: float, x: np.ndarray, z: np.ndarray):
        if loss < self.loss:
            self.loss, self.x, self.z = loss, x.copy(), z.copy()


class _Stop(Exception):
    pass


def _finite(loss: float, *grads: np.ndarray) -> bool:
    return bool(np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads))


def _run_adam(target, g_hat, x, z, best, iterations, step, fd_step, tolerance, train_labels) -> Tuple[int, bool]:
    beta1, beta2 = ADAM_BETAS
    moments = [[np.zeros_like(x), np.zeros_like(x)], [np.zeros_like(z), np.zeros_like(z)]]
    done = 0
    for it in range(iterations):
        loss, grad_x, grad_z = matching_objective(target, g_hat, x, z, fd_step)
        if not _finite(loss, grad_x, grad_z):
            logger.warning(f"Gradient matching diverged at iteration {it}")
            return done, True
        best.offer(loss, x, z)
        done = it + 1
        if loss <= tolerance:
            return done, False
        lr = step * 0.1 ** (it / max(iterations - 1, 1))
        updated = []
        for (m, v), value, g in zip(moments, (x, z), (grad_x, grad_z)):
            m[...] = beta1 * m + (1 - beta1) * g
            v[...] = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** (it + 1))
            v_hat = v / (1 - beta2 ** (it + 1))
            updated.append(value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        x = np.clip(updated[0], 0.0, 1.0)
        if train_labels:
            z = updated[1]

    loss, _, _ = matching_objective(target, g_hat, x, z, fd_step)
    if np.isfinite(loss):
        best.offer(loss, x, z)
    return done, False


def _run_lbfgs(target, g_hat, x, z, best, iterations, fd_step, tolerance, train_labels) -> Tuple[int, bool]:
    """L-BFGS-B with the image bounded to ``[0, 1]``; the loss is scaled by the observed gradient energy."""
    scale = max(float(np.sum(g_hat.flat[target.observable] ** 2)), 1e-300)
    size = x.size
    state = {"done": 0, "diverged": False}

    def unpack(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return theta[:size].reshape(x.shape), (theta[size:].reshape(z.shape) if train_labels else z)

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        xs, zs = unpack(theta)
        loss, grad_x, grad_z = matching_objective(target, g_hat, xs, zs, fd_step)
        if not _finite(loss, grad_x, grad_z):
            logger.warning(f"Gradient matching diverged at iteration {state['done']}")
            state["diverged"] = True
            raise _Stop()
        best.offer(loss, xs, zs)
        if loss <= tolerance:
            raise _Stop()
        grad = np.concatenate([grad_x.ravel(), grad_z.ravel()]) if train_labels else grad_x.ravel()
        return loss / scale, grad / scale

    def count(_):
        state["done"] += 1

    theta = np.concatenate([x.ravel(), z.ravel()]) if train_labels else x.ravel()
    if iterations == 0:
        loss, _, _ = matching_objective(target, g_hat, x, z, fd_step)
        if np.isfinite(loss):
            best.offer(loss, x, z)
        return 0, False
    try:
        optimize.minimize(
            objective,
            theta,
            jac=True,
            method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * size + [(None, None)] * (len(theta) - size),
            callback=count,
            options={"maxiter": iterations, "maxfun": 3 * iterations, "ftol": 0.0, "gtol": 0.0},
        )
    except _Stop:
        pass
    return state["done"], state["diverged"]


def dlg_attack(
    target: AttackTarget,
    iterations: int = 500,
    step: float = 0.05,
    seed: int = 0,
    fd_step: float = 1e-4,
    tolerance: float = 0.0,
    optimizer: str = "lbfgs",
    infer_labels: bool = True,
) -> AttackResult:
    """
    Reconstructs one training image from ``target``.

    The dummy image starts uniform in ``[0, 1]`` and the label logits standard
    normal. When the output bias gradient is fully observable the label is
    read off it and held fixed; otherwise the soft label is optimised with the
    image. ``optimizer`` is ``lbfgs`` (L-BFGS-B, image bounded to ``[0, 1]``)
    or ``adam`` (step decaying geometrically to a tenth, image clipped). The
    best iterate by matching loss is returned. A non-finite loss stops the
    attack and is reported as ``diverged``.

    Raises:
        AttackError: On an unknown optimizer.
    """
    if optimizer not in OPTIMIZERS:
        raise AttackError(f"unknown optimizer {optimizer!r}, expected one of {OPTIMIZERS}")
    g_hat = infer_gradient(target)
    rng = np.random.default_rng(seed)
    spec = target.spec
    x = rng.uniform(0.0, 1.0, size=(1, *spec.input_shape))
    z = rng.normal(0.0, 1.0, size=(1, spec.num_classes))
    observed = int(target.observable.sum())
    if observed == 0:
        logger.debug("No observable coordinates; returning the random initialisation")
        return AttackResult(
            image=x[0],
            label_distribution=softmax(z, axis=1)[0],
            matching_loss=0.0,
            iterations=0,
            observed_coordinates=0,
            degenerate=True,
        )

    label = infer_label(target) if infer_labels else None
    if label is not None:
        z = np.zeros_like(z)
        z[0, label] = LABEL_LOGIT
    best = _BestIterate(x, z)
    if optimizer == "lbfgs":
        done, diverged = _run_lbfgs(target, g_hat, x, z, best, iterations, fd_step, tolerance, label is None)
    else:
        done, diverged = _run_adam(target, g_hat, x, z, best, iterations, step, fd_step, tolerance, label is None)
    return AttackResult(
        image=np.clip(best.x[0], 0.0, 1.0),
        label_distribution=softmax(best.z, axis=1)[0],
        matching_loss=float(best.loss),
        iterations=done,
        observed_coordinates=observed,
        diverged=diverged,
        label_inferred=label is not None,
    )
