"""Binary (P5) PGM reading and writing with 8-bit samples."""

import numpy as np


def quantize(image):
    """Map [0, 1] floats to uint8 by rounding half up."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, image, comments=()):
    """Write a float image in [0, 1] (or a uint8 array) as P5 with maxval 255."""
    image = np.asarray(image)
    pixels = image if image.dtype == np.uint8 else quantize(image)
    if pixels.ndim != 2:
        raise ValueError(f"PGM images are 2-d, got shape {pixels.shape}")
    h, w = pixels.shape
    header = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _tokens(data):
    pos, n = 0, len(data)
    comments = []
    while True:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            end = n if end < 0 else end
            comments.append(data[pos + 1 : end].strip().decode("ascii", "replace"))
            pos = end + 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        yield data[start:pos], pos, comments


def read_pgm(path, with_comments=False):
    """Read a P5 PGM into floats in [0, 1]; optionally return header comments."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = _tokens(data)
    try:
        magic, _, _ = next(tokens)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
        w = int(next(tokens)[0])
        h = int(next(tokens)[0])
        maxval_tok, pos, comments = next(tokens)
        maxval = int(maxval_tok)
    except (StopIteration, ValueError) as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = data[pos + 1 : pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data ({len(body)} of {w * h} bytes)")
    image = np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
    return (image, list(comments)) if with_comments else image
