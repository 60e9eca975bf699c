"""Readers for the run-directory contract: manifests and TSV tables.

A run directory contains ``manifest.txt`` (flat ``key = value`` lines) and
per-stage subdirectories of tab-separated tables: optional ``# key = value``
comment lines, then a header row naming the columns, then data rows.  This
module is the only place that knows the format; it never imports the
producer package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ArtifactError(Exception):
    """A table or manifest failed to parse; the message says where."""


@dataclass
class Table:
    path: Path
    columns: list[str]
    rows: list[list[str]]
    header: dict[str, str] = field(default_factory=dict)

    def column(self, name: str) -> list[str]:
        try:
            idx = self.columns.index(name)
        except ValueError:
            raise ArtifactError(f"{self.path}: no column {name!r}")
        return [row[idx] for row in self.rows]

    def floats(self, name: str) -> list[float]:
        out = []
        for ln, value in enumerate(self.column(name), start=1):
            try:
                out.append(float(value))
            except ValueError:
                raise ArtifactError(
                    f"{self.path}: row {ln}: column {name!r} is not a number "
                    f"({value!r})")
        return out


def read_table(path: Path) -> Table:
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    header: dict[str, str] = {}
    columns: list[str] | None = None
    rows: list[list[str]] = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                key, _, value = body.partition("=")
                header[key.strip()] = value.strip()
            continue
        cells = line.split("\t")
        if columns is None:
            columns = cells
            continue
        if len(cells) != len(columns):
            raise ArtifactError(
                f"{path}: row {ln}: expected {len(columns)} cells, got {len(cells)}")
        rows.append(cells)
    if columns is None:
        raise ArtifactError(f"{path}: empty table")
    return Table(path=path, columns=columns, rows=rows, header=header)


def read_manifest(run_dir: Path) -> dict[str, str]:
    path = Path(run_dir) / "manifest.txt"
    if not path.exists():
        raise ArtifactError(f"no manifest in {run_dir}")
    out: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            continue
        out[key.strip()] = value.strip()
    return out


def stage_artifact(run_dir: Path, manifest: dict[str, str], stage: str,
                   name: str) -> Path:
    key = f"stage.{stage}.artifact.{name}"
    if key not in manifest:
        raise ArtifactError(f"manifest has no artifact {key}")
    return Path(run_dir) / manifest[key]
