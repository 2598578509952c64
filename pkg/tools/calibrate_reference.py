"""Fit the shipped reference chemistry to the nominal cell.

Run from the repo root:

    python tools/calibrate_reference.py

Writes src/batsort/data/{pe,ne}_reference.txt and prints aging-parameter
constants for electrode.py.  Shape parameters are declared below; a single
scale on the fresh aging parameters is solved so the 2.7..4.2 V window
holds exactly the nominal capacity.  Also prints curve diagnostics used to
sanity-check the shapes (voltage span, and where the differential-capacity
structure sits).
"""

import numpy as np

from batsort import electrode as el

# frozen shape set: smooth layered-oxide-like positive, staged graphite-like
# negative whose transitions land between 3.5 and 4.0 V in the full cell
PE_TERMS = [
    (0.30, 3.70, 0.6),
    (0.26, 3.83, 0.7),
    (0.18, 3.95, 0.8),
    (0.14, 4.06, 0.9),
    (0.12, 4.30, 1.5),
]
NE_TERMS = [
    (0.46, 0.088, 20.0),
    (0.28, 0.124, 18.0),
    (0.12, 0.205, 10.0),
    (0.07, 0.310, 4.0),
    (0.07, 0.800, 1.2),
]

# unscaled fresh-cell guess (mAh); the solver rescales all three together
BASE_Q_PE = 800.0
BASE_Q_NE = 850.0
BASE_Q_OFFSET = 29.0


def window_capacity(pe, ne, scale):
    eaps = el.Eaps(BASE_Q_PE * scale, BASE_Q_NE * scale, BASE_Q_OFFSET * scale)
    win = el.usable_window(eaps, pe, ne, 2.7, 4.2)
    return win.capacity, eaps, win


def main():
    pe = el.make_electrode_model(PE_TERMS)
    ne = el.make_electrode_model(NE_TERMS)

    lo, hi = 0.5, 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        cap, _, _ = window_capacity(pe, ne, mid)
        if cap < el.NOMINAL_CAPACITY_MAH:
            lo = mid
        else:
            hi = mid
    scale = 0.5 * (lo + hi)
    cap, eaps, win = window_capacity(pe, ne, scale)

    print(f"scale          {scale:.6f}")
    print(f"capacity       {cap:.4f} mAh (target {el.NOMINAL_CAPACITY_MAH})")
    print(f"window         [{win.q_start:.3f}, {win.q_end:.3f}] mAh")
    print(f"FRESH_Q_PE_MAH = {eaps.q_pe:.6g}")
    print(f"FRESH_Q_NE_MAH = {eaps.q_ne:.6g}")
    print(f"FRESH_Q_OFFSET_MAH = {eaps.q_offset:.6g}")

    # diagnostics: dense curve + differential capacity structure
    ev = el.CellCurveEvaluator(pe, ne)
    q = np.linspace(win.q_start, win.q_end, 4001)
    v = ev.curve(eaps, q)
    print(f"ocv span       [{v[0]:.4f}, {v[-1]:.4f}] V, monotone={bool(np.all(np.diff(v) > 0))}")

    grid = np.arange(np.ceil(v[0] * 1000), np.floor(v[-1] * 1000) + 1) / 1000.0
    qg = np.interp(grid, v, q)
    ic = np.gradient(qg, grid)
    inside = (grid >= 3.5) & (grid <= 4.0)
    # local maxima of the in-window differential capacity
    s = ic.copy()
    peaks = [
        (grid[i], s[i])
        for i in range(1, len(s) - 1)
        if inside[i] and s[i] > s[i - 1] and s[i] > s[i + 1]
    ]
    peaks.sort(key=lambda t: -t[1])
    print("ic peaks in [3.5, 4.0] V (V, mAh/V):")
    for vv, h in peaks[:6]:
        print(f"   {vv:.3f}  {h:8.1f}")
    outside_mass = np.trapezoid(np.where(inside, 0.0, ic), grid)
    total_mass = np.trapezoid(ic, grid)
    print(f"charge fraction outside [3.5,4.0]: {outside_mass / total_mass:.3f}")

    # voltage ranges of each electrode over the window
    x_pe = 1.0 - q / eaps.q_pe
    x_ne = (q - eaps.q_offset) / eaps.q_ne
    print(f"x_pe over window: [{x_pe.min():.4f}, {x_pe.max():.4f}]")
    print(f"x_ne over window: [{x_ne.min():.4f}, {x_ne.max():.4f}]")

    el.save_electrode_model("src/batsort/data/pe_reference.txt", pe)
    el.save_electrode_model("src/batsort/data/ne_reference.txt", ne)
    print("wrote src/batsort/data/*_reference.txt")


if __name__ == "__main__":
    main()
