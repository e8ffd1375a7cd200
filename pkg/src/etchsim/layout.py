"""Mask layouts: polygons and bitmaps for the top/bottom faces plus etch-stop boxes.

Conventions
-----------
* Polygons mark PROTECTED (masked) regions; a layer is filled with the
  even-odd rule over all of its polygons, so an outer outline plus an inner
  outline leaves a hole (an opening).
* Layout polygons are given in the wafer frame, whose x axis runs along the
  wafer flat, i.e. the [110] crystal direction. ``to_lattice_bitmaps`` rotates
  them by 45 degrees (plus ``rotation_deg``) about the footprint center into
  the lattice frame, whose axes are [100] and [010].
* Bitmaps live on the atom-column grid: pixel (i, j) is column (x=i, y=j) in
  a/4 units, pitch a/4, center ((i + 0.5) * pitch, (j + 0.5) * pitch).
* Etch-stop boxes are axis-aligned boxes in lattice-frame um, z measured up
  from the bottom face.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

WAFER_FLAT_DEG = 45.0


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Polygon:
    vertices: tuple

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise LayoutError(f"polygon needs at least 3 vertices, got {len(verts)}")
        if not all(math.isfinite(c) for v in verts for c in v):
            raise LayoutError("polygon vertices must be finite")
        object.__setattr__(self, "vertices", verts)

    def array(self):
        return np.array(self.vertices, dtype=np.float64)

    def area(self):
        v = self.array()
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@dataclass(frozen=True)
class MaskBitmap:
    """Protected (1) / open (0) pixels, indexed ``bits[i, j]`` with i along x."""

    bits: np.ndarray
    pitch: float = 1.0

    def __post_init__(self):
        if not self.pitch > 0:
            raise LayoutError("bitmap pitch must be positive")
        b = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if b.ndim != 2:
            raise LayoutError("bitmap must be 2-D")
        if b.size and b.max() > 1:
            b = (b != 0).astype(np.uint8)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def width(self):
        return self.bits.shape[0]

    @property
    def height(self):
        return self.bits.shape[1]

    def __eq__(self, other):
        return (isinstance(other, MaskBitmap) and self.pitch == other.pitch
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes(), self.pitch))


@dataclass(frozen=True)
class EtchStopBox:
    min: tuple
    max: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise LayoutError(f"bad etch-stop box {lo} .. {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)


@dataclass(frozen=True)
class MaskSet:
    """Top/bottom layers (tuple of Polygons, a MaskBitmap, or None = fully open)."""

    top: object = None
    bottom: object = None
    etch_stops: tuple = ()
    rotation_deg: float = 0.0

    def __post_init__(self):
        for name in ("top", "bottom"):
            layer = getattr(self, name)
            if isinstance(layer, list):
                object.__setattr__(self, name, tuple(layer))
        object.__setattr__(self, "etch_stops", tuple(self.etch_stops))
        object.__setattr__(self, "rotation_deg", float(self.rotation_deg) % 360.0)


def _rotate_points(pts, angle_deg, center):
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    d = pts - center
    return np.column_stack((center[0] + c * d[:, 0] - s * d[:, 1], center[1] + s * d[:, 0] + c * d[:, 1]))


def _transform_layer(layer, rotation_deg, translation, center):
    if layer is None:
        return None
    if isinstance(layer, MaskBitmap):
        return _resample_bitmap(layer, rotation_deg, translation)
    out = []
    for poly in layer:
        pts = _rotate_points(poly.array(), rotation_deg, np.asarray(center, dtype=float))
        pts = pts + np.asarray(translation, dtype=float)
        out.append(Polygon(tuple(map(tuple, pts))))
    return tuple(out)


def _resample_bitmap(bm, rotation_deg, translation):
    """Nearest-neighbor resampling of a bitmap rotated about its center."""
    w, h = bm.bits.shape
    p = bm.pitch
    center = np.array([w * p / 2.0, h * p / 2.0])
    ii, jj = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    pts = np.column_stack(((ii.ravel() + 0.5) * p, (jj.ravel() + 0.5) * p))
    # inverse map: pixel center in the output -> source location
    src = _rotate_points(pts - np.asarray(translation, dtype=float), -rotation_deg, center)
    si = np.floor(src[:, 0] / p).astype(np.int64)
    sj = np.floor(src[:, 1] / p).astype(np.int64)
    ok = (si >= 0) & (si < w) & (sj >= 0) & (sj < h)
    out = np.zeros(w * h, dtype=np.uint8)
    out[ok] = bm.bits[si[ok], sj[ok]]
    return MaskBitmap(out.reshape(w, h), p)


def transform(mask: MaskSet, rotation_deg=0.0, translation=(0.0, 0.0), center=(0.0, 0.0)) -> MaskSet:
    """Rotate every polygon about ``center`` by ``rotation_deg``, then translate.

    Bitmap layers are resampled by nearest neighbor about their own center.
    ``mask.rotation_deg`` is carried over unchanged.
    """
    return MaskSet(
        _transform_layer(mask.top, rotation_deg, translation, center),
        _transform_layer(mask.bottom, rotation_deg, translation, center),
        mask.etch_stops,
        mask.rotation_deg,
    )


def point_in_polygons(px, py, polygons):
    """Even-odd inclusion of points (arrays) in the union-by-parity of polygons."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    for poly in polygons:
        v = poly.array()
        x0, y0 = v[:, 0], v[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        for ax, ay, bx, by in zip(x0, y0, x1, y1):
            if ay == by:
                continue
            straddle = (ay > py) != (by > py)
            xcross = ax + (py - ay) * (bx - ax) / (by - ay)
            inside ^= straddle & (px < xcross)
    return inside


def rasterize(layer, footprint, pitch) -> MaskBitmap:
    """Rasterize a layer (polygons in footprint um) onto a (W, H) pixel grid.

    A pixel is protected iff its center is inside the layer (even-odd).
    """
    w, h = (int(v) for v in footprint)
    if layer is None:
        return MaskBitmap(np.zeros((w, h), dtype=np.uint8), pitch)
    if isinstance(layer, MaskBitmap):
        if layer.bits.shape != (w, h):
            raise LayoutError(f"bitmap shape {layer.bits.shape} does not match footprint {(w, h)}")
        return layer
    cx = (np.arange(w) + 0.5) * pitch
    cy = (np.arange(h) + 0.5) * pitch
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    return MaskBitmap(point_in_polygons(gx, gy, layer).astype(np.uint8), pitch)


def footprint_pixels(dims):
    return (4 * int(dims[0]), 4 * int(dims[1]))


def to_lattice_bitmaps(mask: MaskSet | None, dims, lattice_constant):
    """(top, bottom) uint8 column masks for a domain of ``dims`` unit cells."""
    fp = footprint_pixels(dims)
    pitch = lattice_constant / 4.0
    if mask is None:
        z = np.zeros(fp, dtype=np.uint8)
        return z, z.copy()
    center = (fp[0] * pitch / 2.0, fp[1] * pitch / 2.0)
    out = []
    for layer in (mask.top, mask.bottom):
        if isinstance(layer, MaskBitmap):
            if layer.bits.shape != fp:
                raise LayoutError(f"mask bitmap shape {layer.bits.shape} does not match footprint {fp}")
            if mask.rotation_deg:
                layer = _resample_bitmap(layer, mask.rotation_deg, (0.0, 0.0))
            out.append(np.array(layer.bits, dtype=np.uint8))
        elif layer is None:
            out.append(np.zeros(fp, dtype=np.uint8))
        else:
            rotated = _transform_layer(layer, WAFER_FLAT_DEG + mask.rotation_deg, (0.0, 0.0), center)
            out.append(np.array(rasterize(rotated, fp, pitch).bits, dtype=np.uint8))
    return out[0], out[1]


# -- parsing -----------------------------------------------------------------

def _polygon(raw, where):
    if not isinstance(raw, list):
        raise LayoutError(f"{where}: polygon must be a list of [x, y] points")
    try:
        pts = [(float(p[0]), float(p[1])) for p in raw]
        if any(len(p) != 2 for p in raw):
            raise TypeError
    except (TypeError, ValueError, IndexError):
        raise LayoutError(f"{where}: vertices must be [x, y] number pairs") from None
    try:
        return Polygon(tuple(pts))
    except LayoutError as exc:
        raise LayoutError(f"{where}: {exc}") from None


def parse_layout(doc, base_dir=None) -> MaskSet:
    """Parse a layout document (dict, JSON text, or path) into a MaskSet.

    Layers may give ``polygons`` or a ``bitmap`` path to a binary PGM.
    """
    if isinstance(doc, (str, os.PathLike)) and not str(doc).lstrip().startswith("{"):
        path = os.fspath(doc)
        base_dir = os.path.dirname(os.path.abspath(path)) if base_dir is None else base_dir
        with open(path) as fh:
            text = fh.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LayoutError(f"{path}: malformed JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    elif isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise LayoutError(f"malformed JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise LayoutError("layout document must be a JSON object")

    units = doc.get("units", "um")
    if units != "um":
        raise LayoutError(f"units: only 'um' is supported, got {units!r}")
    rotation = doc.get("rotation_deg", 0.0)
    if not isinstance(rotation, (int, float)):
        raise LayoutError("rotation_deg must be a number")

    layers = {"top": None, "bottom": None}
    for i, layer in enumerate(doc.get("layers", [])):
        where = f"layers[{i}]"
        if not isinstance(layer, dict):
            raise LayoutError(f"{where}: layer must be an object")
        name = layer.get("name")
        if name not in layers:
            raise LayoutError(f"{where}: unknown layer name {name!r} (expected 'top' or 'bottom')")
        if layers[name] is not None:
            raise LayoutError(f"{where}: layer {name!r} given twice")
        if "bitmap" in layer:
            path = layer["bitmap"]
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            layers[name] = load_bitmap(path, pitch=layer.get("pitch_um", 1.0))
        else:
            polys = layer.get("polygons", [])
            if not isinstance(polys, list):
                raise LayoutError(f"{where}.polygons must be a list")
            layers[name] = tuple(_polygon(p, f"{where}.polygons[{k}]") for k, p in enumerate(polys))

    stops = []
    for i, box in enumerate(doc.get("etch_stops", [])):
        try:
            stops.append(EtchStopBox(tuple(box["min"]), tuple(box["max"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"etch_stops[{i}]: {exc}") from None
    return MaskSet(layers["top"], layers["bottom"], tuple(stops), float(rotation))


def layout_to_doc(mask: MaskSet, bitmap_paths=None):
    """Inverse of ``parse_layout`` for polygon layers (bitmaps need ``bitmap_paths``)."""
    layers = []
    bitmap_paths = bitmap_paths or {}
    for name in ("top", "bottom"):
        layer = getattr(mask, name)
        if layer is None:
            continue
        if isinstance(layer, MaskBitmap):
            layers.append({"name": name, "bitmap": bitmap_paths[name], "pitch_um": layer.pitch})
        else:
            layers.append({"name": name, "polygons": [[list(v) for v in p.vertices] for p in layer]})
    return {
        "units": "um",
        "rotation_deg": mask.rotation_deg,
        "layers": layers,
        "etch_stops": [{"min": list(b.min), "max": list(b.max)} for b in mask.etch_stops],
    }


# -- PGM -----------------------------------------------------------------------

def _pgm_tokens(data):
    """Yield (token, end offset) for the PGM header, skipping comments."""
    i, n = 0, len(data)
    while i < n:
        c = data[i:i + 1]
        if c == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            yield data[i:j], j
            i = j


def load_bitmap(path, pitch=1.0) -> MaskBitmap:
    """Read a binary PGM (P5, maxval 255); value >= 128 is protected.

    Image row r maps to y = r, column c to x = c.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise LayoutError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    toks = _pgm_tokens(data[2:])
    try:
        (w, _), (h, _), (mv, end) = next(toks), next(toks), next(toks)
        width, height, maxval = int(w), int(h), int(mv)
    except (StopIteration, ValueError):
        raise LayoutError(f"{path}: truncated or malformed PGM header") from None
    if maxval != 255:
        raise LayoutError(f"{path}: maxval must be 255, got {maxval}")
    start = 2 + end + 1
    payload = data[start:start + width * height]
    if len(payload) != width * height:
        raise LayoutError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return MaskBitmap((img.T >= 128).astype(np.uint8), pitch)


def write_bitmap(bm: MaskBitmap, path):
    img = np.ascontiguousarray((bm.bits.T * 255).astype(np.uint8))
    header = b"P5\n%d %d\n255\n" % (bm.width, bm.height)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header + img.tobytes())
    os.replace(tmp, path)
