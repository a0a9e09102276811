"""Damped Gauss-Newton driver shared by the pose and hand refiners.

The solvers in this package all minimize a sum of squared residuals over
a small parameter vector (6-dof pose increments or 51-dof hand states).
They share one loop: build the normal equations, damp them, try the
step, and only accept steps that lower the loss. Divergence is declared
after `max_rejects` consecutive rejected steps; the best state seen so
far is always what comes back, so a solve that never improves returns
its initialization unchanged.
"""

from __future__ import annotations

from typing import Any, Callable, Tuple

import numpy as np

__all__ = ["damped_gauss_newton"]


def damped_gauss_newton(
    x0: Any,
    evaluate: Callable[[Any, bool], Tuple[float, np.ndarray, np.ndarray]],
    apply_step: Callable[[Any, np.ndarray], Any],
    *,
    max_iters: int = 50,
    step_tol: float = 1e-6,
    init_damping: float = 1e-4,
    damping_boost: float = 10.0,
    damping_drop: float = 0.3,
    max_rejects: int = 5,
) -> Tuple[Any, dict]:
    """Minimize sum(r**2) with Levenberg-style diagonal damping.

    evaluate(x, need_jacobian) returns (loss, residuals, jacobian);
    jacobian may be None when need_jacobian is False. apply_step(x, d)
    retracts an increment onto the state (poses renormalize there).

    Returns (best_x, info) where info carries status ("ok" on
    convergence or iteration cap, "diverged" after max_rejects
    consecutive loss increases), the loss history of accepted states,
    and initial/final losses.
    """
    x = x0
    loss, residuals, jac = evaluate(x, True)
    if not np.isfinite(loss):
        raise ValueError("non-finite loss at the initial state")
    best_x, best_loss = x, loss
    history = [loss]
    mu = init_damping
    rejects = 0
    status = "ok"
    iters_used = 0

    for _ in range(max_iters):
        iters_used += 1
        H = jac.T @ jac
        g = jac.T @ residuals
        # diagonal (Marquardt) scaling, floored relative to the largest
        # curvature so near-null directions still get restrained
        diag = np.diag(H)
        damp = np.maximum(diag, 1e-6 * max(float(diag.max()), 1e-12))
        try:
            delta = np.linalg.solve(H + mu * np.diag(damp), -g)
        except np.linalg.LinAlgError:
            mu *= damping_boost
            rejects += 1
            if rejects >= max_rejects:
                status = "diverged"
                break
            continue

        step_norm = float(np.linalg.norm(delta))
        trial = apply_step(x, delta)
        trial_loss, _, _ = evaluate(trial, False)

        if np.isfinite(trial_loss) and trial_loss < loss:
            x = trial
            loss, residuals, jac = evaluate(x, True)
            history.append(loss)
            if loss < best_loss:
                best_x, best_loss = x, loss
            rejects = 0
            mu = max(mu * damping_drop, 1e-12)
            if step_norm < step_tol:
                break
        else:
            if step_norm < step_tol:
                # the solver is asking for an infinitesimal step it
                # cannot improve on: converged, not diverging
                break
            mu *= damping_boost
            rejects += 1
            if rejects >= max_rejects:
                # a stall after real progress is convergence; only a
                # solve that never improved on its initialization is
                # reported as diverged (the caller gets x0 back then)
                if best_loss >= history[0] * (1.0 - 1e-12):
                    status = "diverged"
                break

    info = {
        "status": status,
        "initial_loss": history[0],
        "final_loss": best_loss,
        "iterations": iters_used,
        "loss_history": history,
    }
    return best_x, info
