"""Figure and summary-page renderer for bpre-lab run directories."""

from .cli import RenderResult, render_report

__all__ = ["RenderResult", "render_report"]
__version__ = "0.1.0"
