"""SVG rendering of generate-and-remask trajectories.

One header image shows the test input and ground truth; every denoise
step then gets its own frame with the full prediction, the cells chosen
for remasking drawn as a cross overlay, and the step's q value printed
in the caption.  Plain markup strings, no drawing library.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tasks import NUM_COLOURS

# the usual ten grid colours
PALETTE = ("#000000", "#0074D9", "#FF4136", "#2ECC40", "#FFDC00",
           "#AAAAAA", "#F012BE", "#FF851B", "#7FDBFF", "#870C25")

CELL = 22
PAD_PX = 6
CAPTION_PX = 22


class RenderError(ValueError):
    pass


@dataclass
class StepFrame:
    grid: np.ndarray          # colours 0..9, full prediction
    remasked: list            # (row, col) cells masked after this prediction
    q: float
    timestep: float


def _check_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.min() < 0 or grid.max() >= NUM_COLOURS:
        raise RenderError(f"renderable grids hold colours 0-9, got shape "
                          f"{grid.shape} range [{grid.min()}, {grid.max()}]")
    return grid


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _grid_markup(grid: np.ndarray, x0: int, y0: int, remasked=()) -> list[str]:
    h, w = grid.shape
    parts = []
    for r in range(h):
        for c in range(w):
            parts.append(f'<rect x="{x0 + c * CELL}" y="{y0 + r * CELL}" '
                         f'width="{CELL}" height="{CELL}" '
                         f'fill="{PALETTE[int(grid[r, c])]}" '
                         f'stroke="#555555" stroke-width="1"/>')
    for (r, c) in remasked:
        x, y = x0 + c * CELL, y0 + r * CELL
        parts.append(f'<line x1="{x + 3}" y1="{y + 3}" x2="{x + CELL - 3}" '
                     f'y2="{y + CELL - 3}" stroke="#FFFFFF" stroke-width="3"/>')
        parts.append(f'<line x1="{x + 3}" y1="{y + CELL - 3}" x2="{x + CELL - 3}" '
                     f'y2="{y + 3}" stroke="#FFFFFF" stroke-width="3"/>')
    return parts


def _document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">')
    bg = f'<rect x="0" y="0" width="{width}" height="{height}" fill="#1b1b1b"/>'
    return "\n".join([head, bg, *body, "</svg>"]) + "\n"


def _caption(text: str, x: int, y: int) -> str:
    return (f'<text x="{x}" y="{y}" fill="#e8e8e8" font-size="13" '
            f'font-family="monospace">{_esc(text)}</text>')


def render_header(input_grid: np.ndarray, target_grid: np.ndarray,
                  path: Path) -> None:
    input_grid = _check_grid(input_grid)
    target_grid = _check_grid(target_grid)
    ih, iw = input_grid.shape
    th, tw = target_grid.shape
    gap = 3 * CELL
    width = PAD_PX * 2 + (iw + tw) * CELL + gap
    height = PAD_PX * 2 + CAPTION_PX + max(ih, th) * CELL
    x_target = PAD_PX + iw * CELL + gap
    body = [_caption("input", PAD_PX, PAD_PX + 14),
            _caption("target", x_target, PAD_PX + 14)]
    body += _grid_markup(input_grid, PAD_PX, PAD_PX + CAPTION_PX)
    body += _grid_markup(target_grid, x_target, PAD_PX + CAPTION_PX)
    Path(path).write_text(_document(width, height, body))


def render_step(frame: StepFrame, index: int, total: int, path: Path) -> None:
    grid = _check_grid(frame.grid)
    h, w = grid.shape
    width = PAD_PX * 2 + w * CELL
    height = PAD_PX * 2 + CAPTION_PX + h * CELL
    caption = (f"step {index + 1}/{total}  t={frame.timestep:.3f}  "
               f"q={frame.q:.3f}  remask={len(frame.remasked)}")
    body = [_caption(caption, PAD_PX, PAD_PX + 14)]
    body += _grid_markup(grid, PAD_PX, PAD_PX + CAPTION_PX, frame.remasked)
    Path(path).write_text(_document(width, height, body))


def render_trajectory(input_grid: np.ndarray, target_grid: np.ndarray,
                      frames: list[StepFrame], out_dir) -> list[Path]:
    """Header plus one frame per denoise step; returns the written paths."""
    if not frames:
        raise RenderError("nothing to render: empty trajectory")
    shapes = {np.asarray(f.grid).shape for f in frames}
    if len(shapes) != 1:
        raise RenderError(f"frames disagree on grid shape: {sorted(shapes)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "header.svg"]
    render_header(input_grid, target_grid, paths[0])
    for i, frame in enumerate(frames):
        path = out_dir / f"step_{i + 1:03d}.svg"
        render_step(frame, i, len(frames), path)
        paths.append(path)
    return paths
