"""Maximum-damage input attacks on a trained VAE.

The attacker looks for an input perturbation delta with ||delta||_2 <= C that
moves the sampled reconstruction g(mu(x + delta) + eta * sigma(x + delta)) as
far as possible from the clean reconstruction g(mu(x)).  Damage is scored as
the relative change in log p(x | z) when z is the mean encoding of x + delta.

Restarts are run as one batch.  Each restart freezes its own eta draw so the
objective it climbs is deterministic.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .vae import _LOG_SCALE_MAX, _LOG_SCALE_MIN, VaeModel, encode, log_likelihood


@dataclass(frozen=True)
class AttackConfig:
    C: float = 1.0
    steps: int = 100
    step_size: float | None = None  # defaults to C / 20
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("attack norm C must be non-negative")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be positive")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be positive")

    @property
    def step(self) -> float:
        return self.C / 20 if self.step_size is None else self.step_size


@dataclass
class AttackResult:
    delta: np.ndarray
    objective: float  # ||g(mu(x + delta)) - g(mu(x))||, the mean-encoding displacement
    degradation: float
    norm_used: float
    attack_objective: float  # best value of the sampled objective that was climbed
    restart_best: np.ndarray = field(default_factory=lambda: np.zeros(0))
    restart_start: np.ndarray = field(default_factory=lambda: np.zeros(0))
    restart_final: np.ndarray = field(default_factory=lambda: np.zeros(0))
    best_restart: int = 0


def project_to_ball(delta, C: float) -> np.ndarray:
    """Euclidean projection of each row onto the ball of radius C."""
    delta = np.asarray(delta, dtype=float)
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    factor = np.where(norms > C, C / np.maximum(norms, 1e-300), 1.0)
    return delta * factor


def likelihood_degradation(model: VaeModel, x, delta) -> float:
    """|log p(x|z*) - log p(x|z)| / |log p(x|z)| for mean encodings z of x and z* of x + delta."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    base = float(log_likelihood(x, model.decoder(encode(model, x)[0]), model.likelihood_scale))
    if abs(base) < 1e-12:
        raise ZeroDivisionError("baseline log-likelihood is numerically zero")
    attacked = float(log_likelihood(x, model.decoder(encode(model, x + delta)[0]), model.likelihood_scale))
    return abs(attacked - base) / abs(base)


def _objective_and_grad(model: VaeModel, inputs: np.ndarray, eta: np.ndarray, target: np.ndarray):
    """Row-wise ||g(mu(u) + eta sigma(u)) - target|| and its gradient in u."""
    tape = GradientTape()
    u = tape.variable(inputs)
    mu = model.encoder_mean.apply(tape, u)
    if model.fixed_mode:
        z = mu + tape.constant(model.fixed_sigma_phi * eta)
    else:
        raw = model.encoder_scale.apply(tape, u)
        z = mu + ad.exp(ad.clip(raw, _LOG_SCALE_MIN, _LOG_SCALE_MAX)) * tape.constant(eta)
    diff = model.decoder.apply(tape, z) - tape.constant(target)
    sq = ad.sum_(diff**2)
    grad_sq = tape.grad_of(tape.gradients(sq), u)
    dist = np.sqrt(np.sum(diff.value**2, axis=1))
    return dist, grad_sq


def _run_restarts(model: VaeModel, x: np.ndarray, starts: np.ndarray, eta: np.ndarray, cfg: AttackConfig):
    """Projected normalized-gradient ascent from every row of ``starts``."""
    target = model.decoder(encode(model, x)[0])[None, :]
    delta = project_to_ball(starts, cfg.C)
    active = np.ones(delta.shape[0], dtype=bool)
    obj, grad = _objective_and_grad(model, x + delta, eta, target)
    start_obj = obj.copy()
    best_obj, best_delta = obj.copy(), delta.copy()
    for _ in range(cfg.steps):
        norms = np.linalg.norm(grad, axis=1)
        bad = ~np.all(np.isfinite(grad), axis=1) | ~np.isfinite(obj)
        active &= ~bad
        # a zero gradient is a stationary point; nothing left to climb
        active &= norms > 0
        if not active.any():
            break
        step = np.zeros_like(delta)
        step[active] = grad[active] / norms[active, None]
        delta = np.where(active[:, None], project_to_ball(delta + cfg.step * step, cfg.C), delta)
        obj, grad = _objective_and_grad(model, x + delta, eta, target)
        better = active & np.isfinite(obj) & (obj > best_obj)
        best_obj[better] = obj[better]
        best_delta[better] = delta[better]
    return best_obj, best_delta, start_obj, obj


def _restart_setup(model: VaeModel, cfg: AttackConfig, rng: np.random.Generator):
    """Frozen eta per restart plus starts: zero, then uniform draws from the ball."""
    d = model.data_dim
    eta = rng.standard_normal((cfg.restarts, model.latent_dim))
    starts = np.zeros((cfg.restarts, d))
    n_rand = cfg.restarts - 1
    if n_rand:
        direction = rng.standard_normal((n_rand, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = cfg.C * rng.uniform(size=(n_rand, 1)) ** (1.0 / d)
        starts[1:] = direction * radius
    return eta, starts


def maximum_damage_attack(model: VaeModel, x, cfg: AttackConfig, warm_start=None) -> AttackResult:
    """Best perturbation over all restarts.

    ``warm_start`` is an optional (delta, restart index) pair from an attack at
    a smaller C.  It is added as an extra start that reuses that restart's eta.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.data_dim,):
        raise ValueError(f"expected a single point of dimension {model.data_dim}")
    eta, starts = _restart_setup(model, cfg, np.random.default_rng(cfg.seed))
    if cfg.C == 0:
        obj, _ = _objective_and_grad(model, np.tile(x, (cfg.restarts, 1)), eta,
                                     model.decoder(encode(model, x)[0])[None, :])
        return AttackResult(np.zeros_like(x), 0.0, 0.0, 0.0, float(obj.max()), obj, obj, obj,
                            int(np.argmax(obj)))
    if warm_start is not None:
        w_delta, w_idx = warm_start
        starts = np.vstack([starts, w_delta])
        eta = np.vstack([eta, eta[w_idx]])
    best_obj, best_delta, start_obj, final_obj = _run_restarts(model, x, starts, eta, cfg)
    k = int(np.argmax(best_obj))
    delta = best_delta[k]
    restart_of_best = k if k < cfg.restarts else warm_start[1]
    displacement = float(np.linalg.norm(model.decoder(encode(model, x + delta)[0])
                                        - model.decoder(encode(model, x)[0])))
    return AttackResult(
        delta=delta,
        objective=displacement,
        degradation=likelihood_degradation(model, x, delta),
        norm_used=float(np.linalg.norm(delta)),
        attack_objective=float(best_obj[k]),
        restart_best=best_obj,
        restart_start=start_obj,
        restart_final=final_obj,
        best_restart=restart_of_best,
    )


@dataclass(frozen=True)
class CurvePoint:
    C: float
    mean_degradation: float
    var_degradation: float
    n_points: int


def attack_sweep(model: VaeModel, x, C_grid, cfg: AttackConfig) -> dict[float, AttackResult]:
    """Nested attacks on one point over an increasing C grid with warm starts.

    Every C reuses the same restart seeds, so the best sampled objective can
    only grow along the grid.
    """
    results: dict[float, AttackResult] = {}
    warm = None
    for C in sorted(C_grid):
        sub = AttackConfig(C, cfg.steps, cfg.step_size, cfg.restarts, cfg.seed)
        res = maximum_damage_attack(model, x, sub, warm_start=warm)
        results[C] = res
        if C > 0:
            warm = (res.delta, res.best_restart)
    return results


def robustness_curve(model: VaeModel, points, C_grid, cfg: AttackConfig) -> list[CurvePoint]:
    """Mean and variance of the degradation over ``points`` for every C.

    Point i attacks with seed (cfg.seed + i) so results do not depend on batching.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("no points to attack")
    grid = sorted(float(c) for c in C_grid)
    table = np.empty((points.shape[0], len(grid)))
    for i, x in enumerate(points):
        point_cfg = AttackConfig(cfg.C, cfg.steps, cfg.step_size, cfg.restarts, cfg.seed + i)
        sweep = attack_sweep(model, x, grid, point_cfg)
        table[i] = [sweep[c].degradation for c in grid]
    ddof = 1 if points.shape[0] > 1 else 0
    return [
        CurvePoint(c, float(table[:, j].mean()), float(table[:, j].var(ddof=ddof)), points.shape[0])
        for j, c in enumerate(grid)
    ]


def write_robustness_csv(curve: list[CurvePoint], path, sigma_phi: float | None,
                         input_noise_sigma: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "mean_degradation", "var_degradation", "n_points", "sigma_phi", "input_noise_sigma"])
        sp = "learned" if sigma_phi is None else f"{sigma_phi:.12g}"
        for p in curve:
            w.writerow([f"{p.C:.12g}", f"{p.mean_degradation:.12g}", f"{p.var_degradation:.12g}",
                        p.n_points, sp, f"{input_noise_sigma:.12g}"])
