"""Dense tensors, bit-exact NPY v1.0 file I/O, and sample-pair manifests.

Every tensor that crosses a process boundary in this project does so as an
NPY v1.0 file (little-endian float32 or float64, C order). The reader and
writer are implemented here against the format spec so that files exchanged
with external exporters are bitwise stable; numpy itself is only used as the
in-memory array container.

Element (c, h, w) of a [C, H, W] tensor lives at flat offset c*H*W + h*W + w.
All other modules rely on this row-major contract.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCRS = {"<f4": np.float32, "<f8": np.float64}
_STAGES = ("feat0", "feat1", "feat2", "feat3", "swin_last")

# Shapes from the backbone stage table; enforced only for these backbone tags.
KNOWN_STAGE_SHAPES = {
    ("convnext", "feat0"): (128, 72, 72),
    ("convnext", "feat1"): (256, 36, 36),
    ("convnext", "feat2"): (512, 18, 18),
    ("convnext", "feat3"): (1024, 9, 9),
    ("swinv2", "swin_last"): (1024, 12, 12),
}


class TensorIOError(Exception):
    """Base class for tensor/manifest I/O failures."""


class NpyFormatError(TensorIOError):
    """File is not a well-formed NPY v1.0 stream."""


class FortranOrderError(NpyFormatError):
    """NPY header declares fortran_order=True, which this project rejects."""


class UnsupportedDtypeError(NpyFormatError):
    """NPY dtype is not little-endian float32/float64."""


class NonFiniteError(TensorIOError):
    """Payload contains NaN or Inf values."""


class ManifestError(TensorIOError):
    """Manifest JSON violates the schema; carries a JSON-pointer location."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{message} (at {pointer or '/'})")
        self.pointer = pointer


class Tensor:
    """Immutable dense tensor: contiguous row-major float32 (or float64) data.

    float32 is the public storage precision; float64 exists for
    finite-difference gradient checking. Construction rejects NaN/Inf and
    non-positive dimensions, and freezes the underlying buffer.
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            raise ValueError("tensor must have at least one dimension")
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:  # never freeze (or share) a caller's buffer
            arr = arr.copy()
            arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying row-major array."""
        return self._data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data.astype(dtype))

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self._data.dtype})"


@dataclass
class FeatureMap:
    """A [C, H, W] feature tensor with backbone/stage/normalization metadata."""

    tensor: Tensor
    backbone: str
    stage: str
    normalized: bool = False
    norms: Tensor | None = None  # [H, W] per-location norms, present iff normalized

    def __post_init__(self):
        if len(self.tensor.shape) != 3:
            raise ValueError(f"feature map must be [C,H,W], got {self.tensor.shape}")
        if self.stage not in _STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {_STAGES}")
        expected = KNOWN_STAGE_SHAPES.get((self.backbone, self.stage))
        if expected is not None and self.tensor.shape != expected:
            raise ValueError(
                f"{self.backbone}/{self.stage} expects shape {expected}, "
                f"got {self.tensor.shape}"
            )
        if self.normalized:
            if self.norms is None:
                raise ValueError("normalized feature map must carry its norms")
            if self.norms.shape != self.tensor.shape[1:]:
                raise ValueError(
                    f"norms shape {self.norms.shape} does not match grid "
                    f"{self.tensor.shape[1:]}"
                )
            actual = np.linalg.norm(self.tensor.data, axis=0)
            if np.max(np.abs(actual - 1.0)) > 1e-4:
                raise ValueError("normalized=True but location norms deviate from 1")

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]


# ---------------------------------------------------------------------------
# NPY v1.0
# ---------------------------------------------------------------------------

def _build_header(shape: tuple[int, ...], descr: str) -> bytes:
    shape_repr = "(" + ", ".join(str(d) for d in shape) + ("," if len(shape) == 1 else "") + ")"
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # data offset (magic + version + hlen + header) must be a multiple of 64
    unpadded = len(_MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - unpadded % 64) % 64
    return header.encode("latin1") + b" " * pad + b"\n"


def save_tensor(t: Tensor, path) -> None:
    """Write ``t`` to ``path`` as an NPY v1.0 file (little-endian, C order)."""
    arr = t.data
    descr = "<f4" if arr.dtype == np.float32 else "<f8"
    header = _build_header(arr.shape, descr)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes((1, 0)))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_tensor(path, dtype: str = "float32") -> Tensor:
    """Load an NPY v1.0 float tensor.

    float64 payloads are converted to the active precision with
    round-to-nearest-even (numpy ``astype``); float32 payloads round-trip
    bitwise. ``dtype`` may be "float32" (default) or "float64".
    """
    if dtype not in ("float32", "float64"):
        raise ValueError(f"active precision must be float32 or float64, got {dtype}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:6] != _MAGIC:
        raise NpyFormatError(f"{path}: missing NPY magic")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise NpyFormatError(f"{path}: unsupported NPY version {major}.{minor}")
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise NpyFormatError(f"{path}: truncated header")
    header_text = raw[10 : 10 + hlen].decode("latin1")
    try:
        meta = ast.literal_eval(header_text)
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"{path}: unparsable header: {exc}") from None
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"{path}: header keys {sorted(meta)} invalid")
    if meta["fortran_order"] is not False:
        raise FortranOrderError(f"{path}: fortran_order files are not supported")
    descr = meta["descr"]
    if descr not in _SUPPORTED_DESCRS:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype {descr!r}")
    shape = meta["shape"]
    if not isinstance(shape, tuple) or not all(
        isinstance(d, int) and d >= 0 for d in shape
    ):
        raise NpyFormatError(f"{path}: invalid shape {shape!r}")
    src_dtype = np.dtype(_SUPPORTED_DESCRS[descr]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = raw[10 + hlen :]
    if len(payload) != count * src_dtype.itemsize:
        raise NpyFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {count * src_dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=src_dtype).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: payload contains NaN/Inf")
    return Tensor(arr.astype(np.dtype(dtype), copy=True))


# ---------------------------------------------------------------------------
# Pair manifests
# ---------------------------------------------------------------------------

@dataclass
class PairEntry:
    original_feature_path: str
    target_feature_path: str
    manipulation_id: str
    sample_id: str
    original_image_path: str | None = None
    manipulated_image_path: str | None = None
    label: int | None = None


@dataclass
class PairManifest:
    """Pairs of original/manipulated samples plus a sample_id -> split map."""

    entries: list[PairEntry] = field(default_factory=list)
    splits: dict[str, str] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def split_entries(self, split: str) -> list[PairEntry]:
        return [e for e in self.entries if self.splits.get(e.sample_id) == split]

    def resolve(self, relpath: str) -> Path:
        return self.base_dir / relpath


def manifest_schema() -> dict:
    """The JSON schema for manifests (also shipped at docs/manifest.schema.json)."""
    schema_path = Path(__file__).parent / "schemas" / "manifest.schema.json"
    with open(schema_path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_manifest(path) -> PairManifest:
    """Parse and schema-validate a manifest file.

    Schema violations raise :class:`ManifestError` with the JSON-pointer
    location of the offending node. Referential invariants (file existence,
    shape agreement, id uniqueness) are checked by :func:`validate_manifest`.
    """
    import jsonschema

    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"not valid JSON: {exc}") from None
    validator = jsonschema.Draft202012Validator(manifest_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        pointer = "/" + "/".join(str(p) for p in first.absolute_path)
        raise ManifestError(first.message, pointer)
    entries = [
        PairEntry(
            original_feature_path=e["original_feature_path"],
            target_feature_path=e["target_feature_path"],
            manipulation_id=e["manipulation_id"],
            sample_id=e["sample_id"],
            original_image_path=e.get("original_image_path"),
            manipulated_image_path=e.get("manipulated_image_path"),
            label=e.get("label"),
        )
        for e in doc["entries"]
    ]
    return PairManifest(entries=entries, splits=dict(doc["splits"]), base_dir=path.parent)


def save_manifest(m: PairManifest, path) -> None:
    doc = {
        "entries": [
            {
                k: v
                for k, v in {
                    "original_feature_path": e.original_feature_path,
                    "target_feature_path": e.target_feature_path,
                    "manipulation_id": e.manipulation_id,
                    "sample_id": e.sample_id,
                    "original_image_path": e.original_image_path,
                    "manipulated_image_path": e.manipulated_image_path,
                    "label": e.label,
                }.items()
                if v is not None
            }
            for e in m.entries
        ],
        "splits": dict(sorted(m.splits.items())),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_manifest(m: PairManifest) -> list[str]:
    """Return the list of invariant violations; empty iff the manifest is sound."""
    violations = []
    seen: dict[tuple[str, str], int] = {}
    for k, entry in enumerate(m.entries):
        split = m.splits.get(entry.sample_id)
        if split is None:
            violations.append(f"entry {k}: sample_id {entry.sample_id!r} has no split")
        else:
            key = (split, entry.sample_id)
            if key in seen:
                violations.append(
                    f"entry {k}: duplicate sample_id {entry.sample_id!r} in split "
                    f"{split!r} (first at entry {seen[key]})"
                )
            else:
                seen[key] = k
        shapes = []
        for role, rel in (
            ("original", entry.original_feature_path),
            ("target", entry.target_feature_path),
        ):
            p = m.resolve(rel)
            if not p.is_file():
                violations.append(f"entry {k}: {role} feature file missing: {rel}")
                shapes.append(None)
                continue
            try:
                shapes.append(_peek_npy_shape(p))
            except TensorIOError as exc:
                violations.append(f"entry {k}: {role} feature unreadable: {exc}")
                shapes.append(None)
        if shapes[0] is not None and shapes[1] is not None and shapes[0] != shapes[1]:
            violations.append(
                f"shape mismatch at entry {k}: {shapes[0]} vs {shapes[1]}"
            )
        for role, rel in (
            ("original image", entry.original_image_path),
            ("manipulated image", entry.manipulated_image_path),
        ):
            if rel is not None and not m.resolve(rel).is_file():
                violations.append(f"entry {k}: {role} file missing: {rel}")
    return violations


def _peek_npy_shape(path) -> tuple[int, ...]:
    """Read only the NPY header and return the declared shape."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:6] != _MAGIC:
            raise NpyFormatError(f"{path}: missing NPY magic")
        if (head[6], head[7]) != (1, 0):
            raise NpyFormatError(f"{path}: unsupported NPY version")
        (hlen,) = struct.unpack("<H", head[8:10])
        header_text = fh.read(hlen).decode("latin1")
    try:
        meta = ast.literal_eval(header_text)
        return tuple(meta["shape"])
    except Exception as exc:
        raise NpyFormatError(f"{path}: unparsable header: {exc}") from None
