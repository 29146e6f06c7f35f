"""
SVG drawings of interactions: the drivable area as run-length rectangles, V1 in red, V2 in blue,
start points as the largest circles and key waypoints emphasized. No timestamps are written,
so identical inputs give identical files.
"""

import json
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from routebench.geometry import Frame
from routebench.scene import Scene

V1_COLOR = "#d62728"
V2_COLOR = "#1f77b4"
ROAD_COLOR = "#d9d9d9"
OFFROAD_COLOR = "#ffffff"
CELL_PX = 6             # SVG units per scene cell
START_RADIUS = 3.5
KEYPOINT_RADIUS = 2.2
POINT_RADIUS = 0.8


def _f(value: float) -> str:
    return f"{value:.2f}"


def scene_rects(scene: Scene) -> List[Tuple[int, int, int]]:
    """
    Drivable cells merged into horizontal runs.

    :return:    List of (row, first column, run length)
    """
    runs = []
    for i, row in enumerate(scene.drivable):
        padded = np.concatenate([[0], row.astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(padded))
        runs.extend((i, int(start), int(stop - start)) for start, stop in zip(edges[::2], edges[1::2]))
    return runs


def _vehicle(points: np.ndarray, frame: Frame, color: str, s: Optional[int], label: str) -> List[str]:
    pixels = [tuple(v * CELL_PX for v in frame.to_pixel(p)) for p in points]
    coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pixels)
    parts = [f'<g class="{label}" fill="{color}" stroke="{color}">',
             f'<polyline points="{coords}" fill="none" stroke-width="1"/>']
    for k, (x, y) in enumerate(pixels[1:], start=1):
        key = s is not None and k % s == 0
        radius = KEYPOINT_RADIUS if key else POINT_RADIUS
        cls = "keypoint" if key else "point"
        parts.append(f'<circle class="{cls}" cx="{_f(x)}" cy="{_f(y)}" r="{_f(radius)}"/>')
    x, y = pixels[0]
    parts.append(f'<circle class="start" cx="{_f(x)}" cy="{_f(y)}" r="{_f(START_RADIUS)}" '
                 f'fill-opacity="0.6"/>')
    parts.append("</g>")
    return parts


def _body(x1, x2, frame: Frame, scene: Optional[Scene], s: Optional[int], title: Optional[str]) -> List[str]:
    width, height = frame.width_px * CELL_PX, frame.height_px * CELL_PX
    parts = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="{OFFROAD_COLOR}" stroke="#808080"/>']
    if scene is not None:
        parts.append(f'<g class="road" fill="{ROAD_COLOR}">')
        parts.extend(f'<rect x="{j * CELL_PX}" y="{i * CELL_PX}" width="{n * CELL_PX}" height="{CELL_PX}"/>'
                     for i, j, n in scene_rects(scene))
        parts.append("</g>")
    parts.extend(_vehicle(np.asarray(x1, float), frame, V1_COLOR, s, "v1"))
    parts.extend(_vehicle(np.asarray(x2, float), frame, V2_COLOR, s, "v2"))
    if title:
        parts.append(f'<text x="4" y="12" font-size="10" font-family="monospace">{_escape(title)}</text>')
    return parts


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _document(width: int, height: int, parts: Sequence[str]) -> str:
    header = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" ' \
             f'viewBox="0 0 {width} {height}">'
    return "\n".join([header, *parts, "</svg>"]) + "\n"


def render_episode(x1, x2, scene: Optional[Scene] = None, s: Optional[int] = None, title: Optional[str] = None,
                   frame: Optional[Frame] = None) -> str:
    """
    :param x1:      V1 positions (N, 2) in normalized coordinates
    :param x2:      V2 positions (N, 2)
    :param scene:   Raster drawn underneath (optional)
    :param s:       Key waypoint stride; every s-th point is emphasized
    :param title:   Caption
    :param frame:   Pixel frame when no scene is given (default 64 x 64)
    :return:        SVG document
    """
    frame = scene.frame if scene is not None else (frame or Frame(64, 64))
    width, height = frame.width_px * CELL_PX, frame.height_px * CELL_PX
    return _document(width, height, _body(x1, x2, frame, scene, s, title))


def render_grid(cells: Dict[Tuple[float, float], Tuple[np.ndarray, np.ndarray]], values: Sequence[float],
                scene: Optional[Scene] = None, s: Optional[int] = None, labels: Tuple[str, str] = ("q1", "q2")) -> str:
    """
    Composite of a sweep: row a, column b holds cells[(a, b)]
    """
    frame = scene.frame if scene is not None else Frame(64, 64)
    tile_w, tile_h = frame.width_px * CELL_PX, frame.height_px * CELL_PX
    gap = 4
    parts = []
    for r, a in enumerate(values):
        for c, b in enumerate(values):
            if (a, b) not in cells:
                continue
            x1, x2 = cells[(a, b)]
            title = f"{labels[0]}={a:g} {labels[1]}={b:g}"
            parts.append(f'<g transform="translate({c * (tile_w + gap)},{r * (tile_h + gap)})">')
            parts.extend(_body(x1, x2, frame, scene, s, title))
            parts.append("</g>")
    n = len(values)
    return _document(n * tile_w + (n - 1) * gap, n * tile_h + (n - 1) * gap, parts)


def write_svg(path: str, svg: str) -> str:
    with open(path, "w") as f:
        f.write(svg)
    return path


def read_records(path: str) -> List[dict]:
    """
    Episode records of a JSON Lines file; a malformed line raises ValueError naming its line number
    """
    records = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                for key in ("x1", "x2"):
                    points = np.asarray(record[key], dtype=float)
                    if points.ndim != 2 or points.shape[1] != 2 or len(points) == 0:
                        raise ValueError(f"`{key}` must be a nonempty list of [x, y] pairs")
                if len(record["x1"]) != len(record["x2"]):
                    raise ValueError("`x1` and `x2` differ in length")
            except (ValueError, KeyError, TypeError) as ex:
                raise ValueError(f"{path}, line {number}: malformed episode record ({ex})")
            records.append(record)
    return records
