"""Renderer entry point: figures plus an index page from one run directory.

Read-only on the run directory.  Figures whose inputs are missing or fail to
parse are skipped with a note on the index page; the exit status stays 0 as
long as the run directory itself has a manifest.
"""

from __future__ import annotations

import argparse
import html
import sys
from dataclasses import dataclass
from pathlib import Path

from .artifacts import ArtifactError, read_manifest
from .figures import BUILDERS, FIGURE_KINDS


@dataclass
class RenderResult:
    figures: list[Path]
    skipped: list[tuple[str, str]]   # (figure kind, reason)
    index: Path


def render_report(run_dir: str | Path, out_dir: str | Path) -> RenderResult:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    manifest = read_manifest(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    figures: list[Path] = []
    skipped: list[tuple[str, str]] = []
    for kind in FIGURE_KINDS:
        try:
            figures.append(BUILDERS[kind](run_dir, manifest, out_dir))
        except ArtifactError as exc:
            skipped.append((kind, str(exc)))

    index = out_dir / "index.html"
    index.write_text(_index_html(manifest, figures, skipped, out_dir),
                     encoding="utf-8")
    return RenderResult(figures=figures, skipped=skipped, index=index)


def _index_html(manifest, figures, skipped, out_dir: Path) -> str:
    digest = manifest.get("config.digest", "unknown")
    status = manifest.get("run.status", "unknown")
    seed = manifest.get("run.seed", "unknown")
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'>",
        "<title>bpre-lab run report</title>",
        "<style>body{font-family:sans-serif;max-width:60em;margin:2em auto}"
        "figure{margin:1.5em 0}img{max-width:100%}"
        ".skip{color:#a33;background:#fee;padding:0.4em 0.8em}</style>",
        "</head><body>",
        f"<h1>Run {html.escape(digest)}</h1>",
        f"<p>status: <b>{html.escape(status)}</b>, seed: {html.escape(seed)}</p>",
    ]
    for fig in figures:
        rel = fig.relative_to(out_dir)
        parts.append(f"<figure><img src='{rel}' alt='{rel}'>"
                     f"<figcaption>{rel}</figcaption></figure>")
    if skipped:
        parts.append("<h2>Skipped figures</h2>")
        for kind, reason in skipped:
            parts.append(f"<p class='skip'><b>{html.escape(kind)}</b>: "
                         f"{html.escape(reason)}</p>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bpre-lab-render",
        description="Render run-summary figures from bpre-lab artifacts")
    parser.add_argument("--run", required=True, help="run directory (with manifest.txt)")
    parser.add_argument("--out", required=True, help="output directory for figures")
    args = parser.parse_args(argv)
    try:
        result = render_report(args.run, args.out)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for fig in result.figures:
        print(f"figure: {fig}")
    for kind, reason in result.skipped:
        print(f"skipped {kind}: {reason}")
    print(f"index: {result.index}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
