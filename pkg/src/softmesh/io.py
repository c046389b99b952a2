"""Binary file formats and the flat key=value config.

SCN1 (scene): magic b"SCN1", header of two little-endian u32 (N, N_t), then
float32 little-endian arrays in C order: shape (3*N*N), texture (3*N_t*N_t),
background (3*2N*2N). Round trips are bit-exact.

BUF1 (debug buffer dump): 16-byte header b"BUF1" + u32 rows + u32 cols +
u32 channels, then float32 little-endian data in C order.

CKPT1 (checkpoint): magic b"CKPT1", u32 config-text length + UTF-8 config
echo (flat key=value lines), u32 array count, then per array: u16 name
length + name bytes + u32 element count + float32 little-endian data.

PPM (P6, maxval 255): bytes are produced by rounding half-to-even from
[0,1]-clipped floats scaled by 255; the bit-exact golden format. PGM (P5)
stores binary masks as 0/255. PNG is convenience-only via Pillow.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scene import SceneRepresentation, make_scene


class FormatError(ValueError):
    """Malformed or unexpected file contents."""


# ---------------------------------------------------------------------------
# SCN1

def save_scene(path, scene: SceneRepresentation) -> None:
    n = scene.n
    n_t = scene.texture.n_t
    with open(path, "wb") as f:
        f.write(b"SCN1")
        f.write(struct.pack("<II", n, n_t))
        f.write(scene.shape.data.astype("<f4").tobytes(order="C"))
        f.write(scene.texture.data.astype("<f4").tobytes(order="C"))
        f.write(scene.background.data.astype("<f4").tobytes(order="C"))


def load_scene(path) -> SceneRepresentation:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"SCN1":
        raise FormatError(f"{path}: not an SCN1 scene file")
    n, n_t = struct.unpack("<II", data[4:12])
    if n < 4 or n_t != 2 * n:
        raise FormatError(f"{path}: inconsistent header N={n}, N_t={n_t}")
    counts = (3 * n * n, 3 * n_t * n_t, 3 * (2 * n) * (2 * n))
    expected = 12 + 4 * sum(counts)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    offset = 12
    arrays = []
    for count, side in zip(counts, (n, n_t, 2 * n)):
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arrays.append(arr.reshape(3, side, side).astype(np.float64))
        offset += 4 * count
    return make_scene(*arrays)


# ---------------------------------------------------------------------------
# BUF1

def save_buffer(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"buffer must be 2D or 3D, got shape {array.shape}")
    rows, cols, channels = arr.shape
    with open(path, "wb") as f:
        f.write(b"BUF1")
        f.write(struct.pack("<III", rows, cols, channels))
        f.write(arr.astype("<f4").tobytes(order="C"))


def load_buffer(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != b"BUF1":
        raise FormatError(f"{path}: not a BUF1 dump")
    rows, cols, channels = struct.unpack("<III", data[4:16])
    count = rows * cols * channels
    if len(data) != 16 + 4 * count:
        raise FormatError(f"{path}: truncated BUF1 dump")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=16)
    out = arr.reshape(rows, cols, channels).astype(np.float64)
    return out[:, :, 0] if channels == 1 else out


# ---------------------------------------------------------------------------
# CKPT1

def save_checkpoint(path, config_text: str, arrays: dict[str, np.ndarray]) -> None:
    """Atomic write (temp file + rename) of named float32 parameter arrays."""
    blob = bytearray()
    blob += b"CKPT1"
    encoded = config_text.encode("utf-8")
    blob += struct.pack("<I", len(encoded))
    blob += encoded
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        name_b = name.encode("utf-8")
        flat = np.asarray(arr).astype("<f4").reshape(-1)
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<I", flat.size)
        blob += flat.tobytes(order="C")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    Path(tmp).replace(path)


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:5] != b"CKPT1":
        raise FormatError(f"{path}: not a CKPT1 checkpoint")
    (cfg_len,) = struct.unpack("<I", data[5:9])
    offset = 9
    config_text = data[offset : offset + cfg_len].decode("utf-8")
    offset += cfg_len
    (n_arrays,) = struct.unpack("<I", data[offset : offset + 4])
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", data[offset : offset + 2])
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (count,) = struct.unpack("<I", data[offset : offset + 4])
        offset += 4
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(
            np.float64
        )
        offset += 4 * count
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return config_text, arrays


# ---------------------------------------------------------------------------
# PPM / PGM / PNG

def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize an (H, W, 3) float image in [0,1] to uint8, half-to-even."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    data = image_to_bytes(image)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))


def _read_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} image")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM into an (H, W, 3) float array in [0,1]."""
    data = Path(path).read_bytes()
    w, h, offset = _read_pnm_header(data, b"P6", path)
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    if pixels.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, offset = _read_pnm_header(data, b"P5", path)
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    if pixels.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w) > 0


def write_image(path, image: np.ndarray) -> None:
    """Write PPM or, by extension, PNG (convenience output only)."""
    if str(path).lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(image_to_bytes(image)).save(path)
    else:
        write_ppm(path, image)


def read_image(path) -> np.ndarray:
    if str(path).lower().endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Flat key=value config

CONFIG_DEFAULTS: dict[str, object] = {
    "seed": 0,
    "n": 16,
    "k_pyramid": 4,
    "s_max": 1.3,
    "scale": 0.002,
    "yaw_range": 45.0,
    "pitch_range": 15.0,
    "b": 2.0,
    "lambda_slope": 1.0,
    "lr_g": 1e-3,
    "lr_d": 1e-3,
    "steps": 1000,
    "mode": "nonsaturating",
    "batch": 8,
    "hidden_g": 1024,
    "hidden_d": 512,
    "crisp_only": 0,
    "size_constraint": 1,
    "checkpoint_every": 1000,
    "lr_fit": 1.0,
    "fit_steps": 500,
}

_INT_KEYS = {
    "seed", "n", "k_pyramid", "steps", "batch", "hidden_g", "hidden_d",
    "crisp_only", "size_constraint", "checkpoint_every", "fit_steps",
}
_STR_KEYS = {"mode"}


def parse_config(text: str) -> dict[str, object]:
    """Parse `key=value` lines; unknown keys are rejected, blanks/# skipped."""
    config = dict(CONFIG_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        if key in _STR_KEYS:
            if value not in ("minimax", "nonsaturating"):
                raise FormatError(f"config line {lineno}: mode must be minimax|nonsaturating")
            config[key] = value
        elif key in _INT_KEYS:
            config[key] = int(value)
        else:
            config[key] = float(value)
    return config


def format_config(config: dict[str, object]) -> str:
    return "\n".join(f"{key}={config[key]}" for key in CONFIG_DEFAULTS) + "\n"


def load_config(path) -> dict[str, object]:
    return parse_config(Path(path).read_text())
