"""Image I/O and preprocessing.

Images are float64 arrays of shape (H, W, C), C in {1, 3}, values in [0, 1].
RawImage keeps integer samples straight off a PGM/PPM stream.
"""

from dataclasses import dataclass

import numpy as np


class PnmError(ValueError):
    """Malformed PNM stream; message carries the byte offset."""


@dataclass
class RawImage:
    height: int
    width: int
    channels: int
    maxval: int
    samples: np.ndarray  # (H, W, C) integer dtype, values in [0, maxval]


@dataclass
class Image:
    samples: np.ndarray  # (H, W, C) float64 in [0, 1]

    @property
    def height(self):
        return self.samples.shape[0]

    @property
    def width(self):
        return self.samples.shape[1]

    @property
    def channels(self):
        return self.samples.shape[2]


def _fail(offset, why):
    raise PnmError(f"byte {offset}: {why}")


def _next_token(data, pos):
    """Skip whitespace/comments, return (token_bytes, new_pos)."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        _fail(pos, "unexpected end of header")
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def _int_token(data, pos, what):
    tok, pos = _next_token(data, pos)
    if not tok.isdigit():
        _fail(pos - len(tok), f"expected integer for {what}, got {tok!r}")
    return int(tok), pos


def load_pnm(data: bytes) -> RawImage:
    if data[:2] == b"P5":
        channels = 1
    elif data[:2] == b"P6":
        channels = 3
    else:
        _fail(0, f"bad magic {data[:2]!r}, expected P5 or P6")
    pos = 2
    width, pos = _int_token(data, pos, "width")
    height, pos = _int_token(data, pos, "height")
    maxval, pos = _int_token(data, pos, "maxval")
    if width < 1 or height < 1:
        _fail(pos, f"bad dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        _fail(pos, f"maxval {maxval} out of range (0, 65535]")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        _fail(pos, "missing whitespace after maxval")
    pos += 1
    bytes_per = 1 if maxval <= 255 else 2
    need = height * width * channels * bytes_per
    raster = data[pos:pos + need]
    if len(raster) < need:
        _fail(pos + len(raster), f"raster truncated, need {need} bytes")
    dtype = ">u2" if bytes_per == 2 else np.uint8
    samples = np.frombuffer(raster, dtype=dtype).astype(np.uint16)
    if samples.max(initial=0) > maxval:
        _fail(pos, f"sample exceeds maxval {maxval}")
    samples = samples.reshape(height, width, channels)
    return RawImage(height, width, channels, maxval, samples)


def encode_pnm(img) -> bytes:
    """PGM (1 channel) or PPM (3 channels) bytes.

    Image samples are quantized with round-half-up at maxval 255; a RawImage
    is encoded with its own maxval (2-byte big-endian samples above 255).
    """
    if isinstance(img, Image):
        q = np.floor(img.samples * 255.0 + 0.5).astype(np.uint8)
        raw = RawImage(img.height, img.width, img.channels, 255, q)
    else:
        raw = img
    magic = b"P5" if raw.channels == 1 else b"P6"
    header = b"%s\n%d %d\n%d\n" % (magic, raw.width, raw.height, raw.maxval)
    if raw.maxval <= 255:
        payload = raw.samples.astype(np.uint8).tobytes()
    else:
        payload = raw.samples.astype(">u2").tobytes()
    return header + payload


def save_pnm(img, path) -> int:
    """Write encode_pnm output to a file. Returns bytes written."""
    blob = encode_pnm(img)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def normalize(raw: RawImage) -> Image:
    v = raw.samples.astype(np.float64)
    lo, hi = v.min(), v.max()  # pooled over all channels
    if hi == lo:
        return Image(np.zeros_like(v))
    return Image((v - lo) / (hi - lo))


def dequantize(raw: RawImage) -> Image:
    """value/maxval scaling; the faithful inverse of save_pnm quantization.

    Unlike min-max normalization this preserves absolute intensities, which
    the Beer-Lambert training triplets rely on.
    """
    return Image(raw.samples.astype(np.float64) / raw.maxval)


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    w = np.array([0.299, 0.587, 0.114])
    return Image((img.samples @ w)[..., None])


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    src = img.samples
    h, w = src.shape[:2]
    if (out_h, out_w) == (h, w):
        return Image(src.copy())
    # half-pixel centers, edge-clamped
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return Image(top * (1 - fy) + bot * fy)
