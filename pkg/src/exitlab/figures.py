"""Figure rendering for reports and the command line (file targets only).

Uses the Agg backend so rendering works headless, and never embeds
timestamps, so the emitted bytes are reproducible and safe to list in a
content-hash manifest.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_exit_histogram",
    "render_profile",
    "render_jump_path",
    "render_plane_path",
]

_SAVEKW = {"dpi": 150, "metadata": {"Date": None}}


def _save(fig, fname) -> None:
    fig.savefig(fname, **_SAVEKW)
    plt.close(fig)


def render_exit_histogram(report, fname) -> None:
    """Per-N exit-location histograms with the excess-cost profile overlaid.

    Empirical frequencies are drawn as steps over arclength; the right
    axis carries the profile excess S interpolated at the bin centers,
    and vertical lines mark the boundary attractor and the profile
    argmin.
    """
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    centers = report.bin_centers
    for N in report.N_list:
        b = report.batch(N)
        n = max(b.n_exits, 1)
        ax.step(centers, b.counts / n, where="mid", label=f"N={N}")
    ax.axvline(report.s_attractor, color="k", lw=0.8, ls=":",
               label="boundary attractor")
    ax.axvline(report.theory["argmin_s"], color="0.4", lw=0.8, ls="--",
               label="profile argmin")
    ax.set_xlabel("arclength s along the exit boundary")
    ax.set_ylabel("exit frequency")
    ax2 = ax.twinx()
    ax2.plot(centers, report.theory["bin_S"], color="tab:red", lw=1.0,
             alpha=0.7)
    ax2.set_ylabel("excess cost S(s)", color="tab:red")
    ax.legend(loc="upper left", fontsize=8)
    ax.set_title(f"{report.model_name}: exit measure vs. quasipotential")
    fig.tight_layout()
    _save(fig, fname)


def render_profile(profile, fname, s_attractor: float | None = None) -> None:
    """Quasipotential V and excess S along the boundary trace."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    ax1.plot(profile.s, profile.value, "o-", ms=3, lw=1.0)
    ax1.set_ylabel("V(z*, y(s))")
    ax2.plot(profile.s, profile.excess, "o-", ms=3, lw=1.0, color="tab:red")
    ax2.set_ylabel("S(s) = V - min V")
    ax2.set_xlabel("arclength s")
    for ax in (ax1, ax2):
        ax.axvline(profile.s[profile.argmin_index], color="0.4", lw=0.8,
                   ls="--")
        if s_attractor is not None:
            ax.axvline(s_attractor, color="k", lw=0.8, ls=":")
    fig.tight_layout()
    _save(fig, fname)


def render_jump_path(path, fname, smooth=None) -> None:
    """Sample path of the chain, optionally against a deterministic orbit.

    path is a JumpPath; smooth a SmoothPath to overlay (law of large
    numbers comparison).
    """
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    t = np.concatenate([[0.0], path.times])
    for dim, label in ((0, "x"), (1, "y")):
        z = np.concatenate([[path.initial[dim]], path.states[:, dim]])
        ax.step(t, z, where="post", lw=0.8, label=f"{label} (N={path.N})")
    if smooth is not None:
        ax.plot(smooth.grid, smooth.points[:, 0], "k--", lw=1.0,
                label="x (drift ODE)")
        ax.plot(smooth.grid, smooth.points[:, 1], "k:", lw=1.0,
                label="y (drift ODE)")
    ax.set_xlabel("t")
    ax.set_ylabel("state")
    ax.legend(fontsize=8)
    ax.set_title(f"{path.model.name}: one sample path")
    fig.tight_layout()
    _save(fig, fname)


def render_plane_path(points, fname, model=None, trace=None,
                      label="minimizing path") -> None:
    """A path in the (x, y) plane with equilibria and boundary context."""
    points = np.asarray(points, dtype=float)
    fig, ax = plt.subplots(figsize=(5.6, 5.2))
    if trace is not None:
        ax.plot(trace.polyline[:, 0], trace.polyline[:, 1], color="0.6",
                lw=1.0, label="exit boundary")
    ax.plot(points[:, 0], points[:, 1], "o-", ms=2.5, lw=1.0, label=label)
    if model is not None:
        ax.plot(*model.endemic, "k*", ms=10, label="endemic equilibrium")
        ax.plot(*model.boundary_attractor, "ks", ms=6,
                label="boundary attractor")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(fontsize=8)
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    _save(fig, fname)
