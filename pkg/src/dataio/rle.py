"""
Run-length mask codec of the salt corpus: column-major pixel order (top to bottom, then the next
column), 1-indexed run starts, whitespace-separated (start, length) pairs.
"""
import numpy as np

from src.errors import RleParseError


def decode_rle(rle: str, height: int, width: int) -> np.ndarray:
    """
    Decodes a run-length label into a binary mask.

    Args:
        rle (str): Empty, or alternating positive (start, length) integers.
        height (int): Mask height.
        width (int): Mask width.

    Returns:
        np.ndarray: [height, width] uint8 mask of 0/1.

    Raises:
        RleParseError: On an odd token count, a non-integer or non-positive token, or a run
            that ends beyond height * width; the error carries the offending token index.
    """
    tokens = (rle or "").split()
    if len(tokens) % 2:
        raise RleParseError("odd number of tokens; every start needs a length", len(tokens) - 1)
    n_pixels = height * width
    flat = np.zeros(n_pixels, dtype=np.uint8)
    for index in range(0, len(tokens), 2):
        values = []
        for offset in (0, 1):
            token = tokens[index + offset]
            try:
                value = int(token)
            except ValueError:
                raise RleParseError(f"'{token}' is not an integer", index + offset) from None
            if value <= 0:
                raise RleParseError(f"run values must be positive, got {value}", index + offset)
            values.append(value)
        start, length = values
        if start - 1 + length > n_pixels:
            raise RleParseError(f"run {start}+{length} exceeds the {height}x{width} mask", index)
        flat[start - 1:start - 1 + length] = 1
    return flat.reshape(width, height).T


def encode_rle(mask: np.ndarray) -> str:
    """
    Encodes a binary mask as the minimal run list; the empty mask encodes to "".

    Raises:
        ValueError: If the mask holds values other than 0 and 1.
    """
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary (0/1)")
    pixels = np.concatenate([[0], mask.T.flatten().astype(np.int64), [0]])
    runs = np.where(pixels[1:] != pixels[:-1])[0] + 1
    runs[1::2] -= runs[::2]
    return " ".join(str(v) for v in runs)
