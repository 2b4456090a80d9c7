"""CSV loading and schema validation for simulation artifacts.

The upstream command-line tool writes every CSV with a versioned schema
comment as the first line ("# schema: trace v1") followed by a header
row. Loading here is strict: the columns a plot kind needs must be
present, and a file with no data rows is rejected before any figure is
touched.
"""

import csv
import math
from dataclasses import dataclass, field


class SchemaError(ValueError):
    """Raised when a CSV is missing required columns or data."""


# Required columns per schema. Trace files may carry suffixed parameter
# columns (param_E, param_nu, ...) instead of the scalar names, so the
# variable-width groups are validated by prefix.
SCHEMAS = {
    "trace": {
        "fixed": ["iter", "loss"],
        "prefixes": ["param", "grad_ana", "grad_fd"],
    },
    "bench": {
        "fixed": ["solver", "precond", "iter", "relres", "wall_ms",
                  "diverged"],
        "prefixes": [],
    },
    "gradcheck": {
        "fixed": ["var", "eta", "grad_ana", "grad_fd", "relerr",
                  "friction_flag"],
        "prefixes": [],
    },
}


@dataclass
class Table:
    """A parsed CSV: header names plus string cell rows."""

    path: str
    header: list
    rows: list = field(default_factory=list)

    def column(self, name):
        """Numeric column; blank cells (skipped FD refs) become NaN."""
        j = self.header.index(name)
        out = []
        for r in self.rows:
            cell = r[j].strip()
            out.append(float(cell) if cell else math.nan)
        return out

    def strings(self, name):
        j = self.header.index(name)
        return [r[j] for r in self.rows]

    def group(self, prefix):
        """Column names matching a schema group, e.g. param or param_E."""
        return [c for c in self.header
                if c == prefix or c.startswith(prefix + "_")]


def load_table(path, schema):
    """Read one CSV and validate it against a named schema."""
    spec = SCHEMAS[schema]
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f)
                if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise SchemaError(f"{path}: empty CSV, nothing to plot")
    table = Table(path=str(path), header=[c.strip() for c in rows[0]],
                  rows=rows[1:])
    for col in spec["fixed"]:
        if col not in table.header:
            raise SchemaError(f"{path}: missing column '{col}' "
                              f"(schema {schema})")
    for prefix in spec["prefixes"]:
        if not table.group(prefix):
            raise SchemaError(f"{path}: missing column '{prefix}' "
                              f"(schema {schema})")
    if not table.rows:
        raise SchemaError(f"{path}: no data rows")
    width = len(table.header)
    for i, r in enumerate(table.rows):
        if len(r) != width:
            raise SchemaError(f"{path}: row {i + 1} has {len(r)} cells, "
                              f"header has {width}")
    return table
