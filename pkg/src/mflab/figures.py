"""Matplotlib figures rendered next to the delimited output files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "functional_figure",
    "sweep_figure",
    "oracle_figure",
    "histogram_figure",
    "trajectory_figure",
]

_RC = {
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 130,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def functional_figure(path, times, integrand, integrand_se, cum_lambda,
                      cum_sharp, theory=None, title=""):
    """Integrand with error band plus the cumulative bounds."""
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4.0))
        integrand = np.asarray(integrand)
        se = np.asarray(integrand_se)
        ax1.plot(times, integrand, lw=1.2, color="tab:blue", label="integrand mean")
        ax1.fill_between(times, integrand - 3 * se, integrand + 3 * se,
                         color="tab:blue", alpha=0.25, label="±3 SE")
        ax1.set_xlabel("t")
        ax1.set_ylabel("mismatch integrand")
        ax1.legend()
        ax2.plot(times, cum_lambda, lw=1.4, color="tab:red", label="cumulative (1/2λ)Σ∫|b|²")
        ax2.plot(times, cum_sharp, lw=1.2, ls="--", color="tab:orange",
                 label="cumulative ½Σ∫|σᵀΛ⁻¹b|²")
        if theory is not None:
            theory = np.asarray(theory, dtype=float)
            finite = np.isfinite(theory)
            ax2.plot(np.asarray(times)[finite], theory[finite], lw=1.2,
                     color="tab:green", label="theory envelope")
            ax2.set_yscale("log")
        ax2.set_xlabel("t")
        ax2.set_ylabel("divergence bound")
        ax2.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def sweep_figure(path, xs, values, ses, bound=None, xlabel="", log_x=False, title=""):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        xs = np.asarray(xs, dtype=float)
        values = np.asarray(values, dtype=float)
        ses = np.asarray(ses, dtype=float)
        ax.errorbar(xs, values, yerr=3 * ses, fmt="o-", capsize=3,
                    color="tab:blue", label="functional")
        if bound is not None:
            ax.plot(xs, np.broadcast_to(bound, xs.shape), ls="--",
                    color="tab:green", label="bound")
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("value")
        ax.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def oracle_figure(path, times, s, c, sbar, mc_points=None, title=""):
    """Oracle covariance trajectories with optional Monte Carlo markers.

    ``mc_points`` is a sequence of (t, s_hat, s_se, c_hat, c_se) tuples.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(times, s, color="tab:blue", label="s(t)")
        ax.plot(times, c, color="tab:red", label="c(t)")
        ax.plot(times, sbar, color="tab:green", ls="--", label="mean-field s̄(t)")
        if mc_points:
            for t, s_hat, s_se, c_hat, c_se in mc_points:
                ax.errorbar([t], [s_hat], yerr=[3 * s_se], fmt="s", color="tab:blue",
                            capsize=4, markersize=5)
                ax.errorbar([t], [c_hat], yerr=[3 * c_se], fmt="s", color="tab:red",
                            capsize=4, markersize=5)
        ax.set_xlabel("t")
        ax.set_ylabel("covariance")
        ax.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def histogram_figure(path, samples, vline=None, xlabel="", title=""):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.hist(np.asarray(samples), bins=80, density=True, color="tab:blue", alpha=0.7)
        if vline is not None:
            ax.axvline(vline, color="tab:red", ls="--")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("density")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def trajectory_figure(path, times, X, n_show=8, title=""):
    """Fan of particle trajectories (first coordinate)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        n_show = min(n_show, X.shape[1])
        for i in range(n_show):
            ax.plot(times, X[:, i, 0], lw=0.9)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
        if title:
            fig.suptitle(title)
        return _save(fig, path)
