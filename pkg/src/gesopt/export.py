"""CSV slice exports of value and policy tables for surface plots.

A slice fixes the period index and the storage-mode cell and sweeps the
remaining (residual demand, tank temperature) plane.  The residual column
is printed re-seasonalized (annual mean plus deviation) so the CSV can be
plotted against physical demand directly.  Headers carry units; action
slices use the integer codes (-2 spill, -1 charge, 0 wait, +1 heat pump,
+2 fuel).
"""

from __future__ import annotations

VALUE_HEADER = ("r_tilde_mj_h", "p_c", "value_eur")
POLICY_HEADER = ("r_tilde_mj_h", "p_c", "action_code")


def parse_slice(spec, grid):
    """Parse ``"n=71,y1=0,y2=0,..."`` (or ``"n=71,y=4"``) into (n, flat y).

    The period axis ``n`` is always required.  The storage cell is given
    either per axis (``y1`` .. ``y<ell>``) or as one flat index ``y``.
    Anything malformed, missing, duplicated or out of range raises
    :class:`IndexError` with the offending entry named.
    """
    fixed = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, raw = part.partition("=")
        key = key.strip()
        if not sep:
            raise IndexError(f"slice entry {part!r} is not of the form axis=index")
        if key in fixed:
            raise IndexError(f"slice axis {key!r} given twice")
        try:
            fixed[key] = int(raw.strip())
        except ValueError:
            raise IndexError(
                f"slice index {raw.strip()!r} for axis {key!r} is not an "
                f"integer") from None
    if "n" not in fixed:
        raise IndexError("slice must fix the period axis, e.g. n=71")
    n = fixed.pop("n")
    y_axes = [f"y{k}" for k in range(1, grid.ell + 1)]
    if "y" in fixed:
        if len(fixed) != 1:
            extra = sorted(set(fixed) - {"y"})
            raise IndexError(f"flat index y cannot be combined with {extra}")
        iy = fixed["y"]
        if not 0 <= iy < grid.n_y:
            raise IndexError(f"flat storage index {iy} outside 0..{grid.n_y - 1}")
        return n, iy
    missing = [a for a in y_axes if a not in fixed]
    unknown = sorted(set(fixed) - set(y_axes))
    if missing or unknown:
        raise IndexError(
            f"storage axes must be exactly {y_axes} (or a single flat y); "
            f"missing {missing}, unknown {unknown}")
    iy = 0
    for k, axis in enumerate(y_axes):
        size = grid.shape[2 + k]
        idx = fixed[axis]
        if not 0 <= idx < size:
            raise IndexError(f"index {idx} for {axis} outside 0..{size - 1}")
        iy = iy * size + idx
    return n, iy


def export_slices(value_table, policy_table, grid, mu_r, spec, out,
                  table="value"):
    """Write one (residual, tank) slice of the requested table as CSV."""
    n, iy = parse_slice(spec, grid)
    if table == "value":
        if not 0 <= n < value_table.values.shape[0]:
            raise IndexError(
                f"period {n} outside the value range "
                f"0..{value_table.values.shape[0] - 1}")
        data = value_table.values[n]
        header = VALUE_HEADER

        def cell(flat):
            return repr(float(data[flat]))
    elif table == "policy":
        if not 0 <= n < policy_table.actions.shape[0]:
            raise IndexError(
                f"period {n} outside the policy range "
                f"0..{policy_table.actions.shape[0] - 1} "
                f"(the terminal period has no action)")
        data = policy_table.actions[n]
        header = POLICY_HEADER

        def cell(flat):
            return str(int(data[flat]))
    else:
        raise ValueError(f"table must be 'value' or 'policy', got {table!r}")
    n_p, n_y = grid.shape[1], grid.n_y
    lines = [",".join(header)]
    for ir, r in enumerate(grid.axes[0].points):
        r_tilde = repr(float(mu_r + r))
        for ip, p in enumerate(grid.axes[1].points):
            flat = (ir * n_p + ip) * n_y + iy
            lines.append(f"{r_tilde},{repr(float(p))},{cell(flat)}")
    with open(out, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return out
