"""Piecewise-stationary synthetic segmentation streams and their on-disk form.

A stream is a sequence of frames, each a (H, W, D) float64 feature grid with
a binary foreground mask. Frames are grouped into contiguous sub-chunks; each
sub-chunk draws from one stationary regime, and consecutive sub-chunks differ
abruptly. All randomness comes from a single seeded PCG64 generator
(numpy.random.default_rng), so identical specs produce bit-identical streams.

Disk layout of a stream directory:

* ``stream.json``        manifest: canvas size, seed, sub-chunks with their
                         regimes, sorted annotated frame indices, and the
                         index of the given ground-truth frame.
* ``frame_%06d.clvf``    features: magic ``CLVF``, three little-endian u32
                         (height, width, channels), then height*width*channels
                         float64 little-endian values, row-major and
                         channel-interleaved.
* ``mask_%06d.pgm``      binary PGM (P5, maxval 255); 0 is background, 255 is
                         foreground, and any stored value >= 128 loads as
                         foreground. Masks may exist only for annotated
                         frames; feature files must exist for every frame.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, GenerationError, StreamFormatError
from .validation import as_binary_mask, as_feature_grid, as_rng

FEATURE_MAGIC = b"CLVF"
OBJECT_SHAPES = ("disc", "rectangle", "ring")


@dataclass(frozen=True)
class RegimeSpec:
    """One stationary appearance regime: object geometry plus per-class
    feature distributions (Gaussian around a class mean)."""

    object_shape: str = "disc"
    object_scale: float = 10.0
    foreground_feature_mean: tuple = (1.0,)
    background_feature_mean: tuple = (-1.0,)
    feature_noise_std: float = 0.0
    motion: tuple = (0.0, 0.0)
    start_center: tuple | None = None

    def validate(self, channels):
        if self.object_shape not in OBJECT_SHAPES:
            raise ConfigurationError(
                f"object_shape must be one of {OBJECT_SHAPES}, got {self.object_shape!r}"
            )
        if len(self.foreground_feature_mean) != channels:
            raise ConfigurationError(
                f"foreground mean has {len(self.foreground_feature_mean)} channels, "
                f"expected {channels}"
            )
        if len(self.background_feature_mean) != channels:
            raise ConfigurationError(
                f"background mean has {len(self.background_feature_mean)} channels, "
                f"expected {channels}"
            )
        if self.feature_noise_std < 0:
            raise ConfigurationError("feature_noise_std must be >= 0")
        if self.object_scale <= 0:
            raise ConfigurationError("object_scale must be positive")

    def to_dict(self):
        d = {
            "object_shape": self.object_shape,
            "object_scale": self.object_scale,
            "foreground_feature_mean": list(self.foreground_feature_mean),
            "background_feature_mean": list(self.background_feature_mean),
            "feature_noise_std": self.feature_noise_std,
            "motion": list(self.motion),
        }
        if self.start_center is not None:
            d["start_center"] = list(self.start_center)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            object_shape=d["object_shape"],
            object_scale=float(d["object_scale"]),
            foreground_feature_mean=tuple(float(v) for v in d["foreground_feature_mean"]),
            background_feature_mean=tuple(float(v) for v in d["background_feature_mean"]),
            feature_noise_std=float(d["feature_noise_std"]),
            motion=tuple(float(v) for v in d["motion"]),
            start_center=tuple(float(v) for v in d["start_center"])
            if d.get("start_center") is not None
            else None,
        )


@dataclass(frozen=True)
class SubChunk:
    """Inclusive frame range governed by one regime. Curated manifests may
    carry regime=None when boundaries were detected rather than generated."""

    start_frame: int
    end_frame: int
    regime: RegimeSpec | None = None

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ConfigurationError(
                f"sub-chunk start {self.start_frame} exceeds end {self.end_frame}"
            )

    @property
    def length(self):
        return self.end_frame - self.start_frame + 1


@dataclass
class StreamSpec:
    """Full description of a stream; doubles as the manifest content."""

    height: int
    width: int
    channels: int
    sub_chunks: list
    seed: int = 0
    ground_truth_frame: int = 0
    annotated_frames: list | None = None
    fps: float = 15.0

    @property
    def total_frames(self):
        return self.sub_chunks[-1].end_frame + 1 if self.sub_chunks else 0

    def validate(self, require_regimes=False):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigurationError("canvas dimensions and channels must be >= 1")
        if not self.sub_chunks:
            raise ConfigurationError("a stream needs at least one sub-chunk")
        expected_start = 0
        for i, chunk in enumerate(self.sub_chunks):
            if chunk.start_frame != expected_start:
                raise ConfigurationError(
                    f"sub-chunk {i} starts at {chunk.start_frame}, expected "
                    f"{expected_start}; sub-chunks must tile the stream"
                )
            expected_start = chunk.end_frame + 1
            if require_regimes:
                if chunk.regime is None:
                    raise ConfigurationError(f"sub-chunk {i} has no regime")
                chunk.regime.validate(self.channels)
        first = self.sub_chunks[0]
        if not first.start_frame <= self.ground_truth_frame <= first.end_frame:
            raise ConfigurationError(
                f"ground-truth frame {self.ground_truth_frame} is outside the "
                f"first sub-chunk [{first.start_frame}..{first.end_frame}]"
            )
        if self.annotated_frames is not None:
            total = self.total_frames
            previous = -1
            for idx in self.annotated_frames:
                if not 0 <= idx < total:
                    raise ConfigurationError(
                        f"annotated frame {idx} is outside [0, {total - 1}]"
                    )
                if idx <= previous:
                    raise ConfigurationError("annotated_frames must be sorted and unique")
                previous = idx
        return self

    def sub_chunk_of(self, frame_index):
        for i, chunk in enumerate(self.sub_chunks):
            if chunk.start_frame <= frame_index <= chunk.end_frame:
                return i
        raise ConfigurationError(f"frame {frame_index} is outside the stream")

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "seed": self.seed,
            "fps": self.fps,
            "ground_truth_frame": self.ground_truth_frame,
            "sub_chunks": [
                {
                    "start": c.start_frame,
                    "end": c.end_frame,
                    "regime": c.regime.to_dict() if c.regime is not None else None,
                }
                for c in self.sub_chunks
            ],
            "annotated_frames": list(self.annotated_frames)
            if self.annotated_frames is not None
            else None,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            chunks = [
                SubChunk(
                    start_frame=int(c["start"]),
                    end_frame=int(c["end"]),
                    regime=RegimeSpec.from_dict(c["regime"])
                    if c.get("regime") is not None
                    else None,
                )
                for c in d["sub_chunks"]
            ]
            return cls(
                height=int(d["height"]),
                width=int(d["width"]),
                channels=int(d["channels"]),
                sub_chunks=chunks,
                seed=int(d["seed"]),
                ground_truth_frame=int(d.get("ground_truth_frame", 0)),
                annotated_frames=[int(v) for v in d["annotated_frames"]]
                if d.get("annotated_frames") is not None
                else None,
                fps=float(d.get("fps", 15.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed stream spec: {exc}") from exc


@dataclass
class Frame:
    """One stream element. truth_mask is None for frames that were never
    annotated (features are always present)."""

    index: int
    features: np.ndarray
    truth_mask: np.ndarray | None = None


def _render_mask(spec, chunk, frame_index):
    regime = chunk.regime
    center = regime.start_center
    if center is None:
        center = ((spec.height - 1) / 2.0, (spec.width - 1) / 2.0)
    offset = frame_index - chunk.start_frame
    cy = center[0] + regime.motion[0] * offset
    cx = center[1] + regime.motion[1] * offset
    rows = np.arange(spec.height, dtype=np.float64)[:, None]
    cols = np.arange(spec.width, dtype=np.float64)[None, :]
    s = regime.object_scale
    if regime.object_shape == "disc":
        mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= s**2
    elif regime.object_shape == "rectangle":
        mask = (np.abs(rows - cy) <= s) & (np.abs(cols - cx) <= s)
    else:  # ring
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        mask = (d2 <= s**2) & (d2 > (s / 2.0) ** 2)
    return mask.astype(np.uint8)


def generate_stream(spec):
    """Materialize every frame of ``spec``. Deterministic given spec.seed.

    Raises GenerationError (naming the frame) if the object ever leaves the
    canvas entirely.
    """
    spec.validate(require_regimes=True)
    rng = as_rng(spec.seed)
    frames = []
    for chunk in spec.sub_chunks:
        fg = np.asarray(chunk.regime.foreground_feature_mean, dtype=np.float64)
        bg = np.asarray(chunk.regime.background_feature_mean, dtype=np.float64)
        sigma = chunk.regime.feature_noise_std
        for t in range(chunk.start_frame, chunk.end_frame + 1):
            mask = _render_mask(spec, chunk, t)
            if not mask.any():
                raise GenerationError(
                    f"object left the canvas at frame {t}", frame_index=t
                )
            features = np.where(mask[:, :, None].astype(bool), fg, bg)
            if sigma > 0:
                features = features + sigma * rng.standard_normal(
                    (spec.height, spec.width, spec.channels)
                )
            frames.append(Frame(index=t, features=np.ascontiguousarray(features), truth_mask=mask))
    return frames


# ---------------------------------------------------------------------------
# file formats


def write_feature_file(path, features):
    features = as_feature_grid(features)
    h, w, c = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(features.astype("<f8").tobytes(order="C"))


def read_feature_file(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StreamFormatError(f"cannot read feature file {path.name}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise StreamFormatError(f"{path.name}: bad magic, not a CLVF file")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = 16 + h * w * c * 8
    if len(raw) != expected:
        raise StreamFormatError(
            f"{path.name}: payload is {len(raw) - 16} bytes, header implies {expected - 16}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=16).reshape(h, w, c)
    return np.ascontiguousarray(data)


def write_mask_pgm(path, mask):
    mask = as_binary_mask(mask)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write((mask * np.uint8(255)).tobytes(order="C"))


def read_mask_pgm(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StreamFormatError(f"cannot read mask file {path.name}: {exc}") from exc
    # Header: "P5", whitespace/comment separated width, height, maxval.
    tokens = []
    pos = 0
    while len(tokens) < 4 and pos < len(raw):
        m = re.match(rb"(\s+|#[^\n]*\n)", raw[pos:])
        if m:
            pos += m.end()
            continue
        m = re.match(rb"\S+", raw[pos:])
        tokens.append(m.group(0))
        pos += m.end()
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise StreamFormatError(f"{path.name}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise StreamFormatError(f"{path.name}: malformed PGM header") from exc
    if maxval < 1 or maxval > 255:
        raise StreamFormatError(f"{path.name}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos : pos + w * h]
    if len(pixels) != w * h:
        raise StreamFormatError(f"{path.name}: truncated pixel data")
    values = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return (values >= 128).astype(np.uint8)


def frame_file_name(index):
    return f"frame_{index:06d}.clvf"


def mask_file_name(index):
    return f"mask_{index:06d}.pgm"


def save_manifest(spec, path):
    path = Path(path)
    payload = json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n"
    path.write_text(payload)


def load_manifest(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise StreamFormatError(f"cannot read manifest {path.name}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StreamFormatError(f"{path.name}: invalid JSON: {exc}") from exc
    try:
        spec = StreamSpec.from_dict(d)
        spec.validate()
    except ConfigurationError as exc:
        raise StreamFormatError(f"{path.name}: {exc}") from exc
    return spec


def save_stream(spec, frames, directory, masks="all"):
    """Write manifest, feature files, and mask files into ``directory``.

    masks="all" writes every truth mask, masks="annotated" only those listed
    in spec.annotated_frames (sparse evaluation-style layout).
    """
    if masks not in ("all", "annotated"):
        raise ConfigurationError(f"masks must be 'all' or 'annotated', got {masks!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_manifest(spec, directory / "stream.json")
    annotated = set(spec.annotated_frames or [])
    annotated.add(spec.ground_truth_frame)
    for frame in frames:
        write_feature_file(directory / frame_file_name(frame.index), frame.features)
        if frame.truth_mask is None:
            continue
        if masks == "all" or frame.index in annotated:
            write_mask_pgm(directory / mask_file_name(frame.index), frame.truth_mask)


def load_stream(directory):
    """Load (spec, frames) from a stream directory.

    Every frame needs its feature file; masks are optional except for the
    ground-truth frame. Mask and feature dimensions must agree with the
    manifest.
    """
    directory = Path(directory)
    spec = load_manifest(directory / "stream.json")
    frames = []
    for index in range(spec.total_frames):
        fpath = directory / frame_file_name(index)
        if not fpath.exists():
            raise StreamFormatError(f"missing feature file {fpath.name}")
        features = read_feature_file(fpath)
        if features.shape != (spec.height, spec.width, spec.channels):
            raise StreamFormatError(
                f"{fpath.name}: shape {features.shape} does not match manifest "
                f"({spec.height}, {spec.width}, {spec.channels})"
            )
        mpath = directory / mask_file_name(index)
        mask = None
        if mpath.exists():
            mask = read_mask_pgm(mpath)
            if mask.shape != (spec.height, spec.width):
                raise StreamFormatError(
                    f"{mpath.name}: shape {mask.shape} does not match manifest "
                    f"({spec.height}, {spec.width})"
                )
        frames.append(Frame(index=index, features=features, truth_mask=mask))
    gt = frames[spec.ground_truth_frame]
    if gt.truth_mask is None:
        raise StreamFormatError(
            f"ground-truth frame {spec.ground_truth_frame} has no mask file"
        )
    return spec, frames


def stationary_spec(
    height=64,
    width=64,
    channels=8,
    n_frames=100,
    seed=0,
    regime=None,
):
    """Convenience single-sub-chunk spec (no drift)."""
    if regime is None:
        regime = RegimeSpec(
            object_shape="disc",
            object_scale=min(height, width) / 5.0,
            foreground_feature_mean=tuple([2.0] + [0.0] * (channels - 1)),
            background_feature_mean=tuple([-2.0] + [0.0] * (channels - 1)),
            feature_noise_std=0.5,
        )
    return StreamSpec(
        height=height,
        width=width,
        channels=channels,
        seed=seed,
        sub_chunks=[SubChunk(0, n_frames - 1, regime)],
    )
