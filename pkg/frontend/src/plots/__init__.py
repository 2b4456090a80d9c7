"""Figure rendering for simulation CSV artifacts."""

from .io import SchemaError, Table, load_table
from .render import render

__all__ = ["SchemaError", "Table", "load_table", "render"]
