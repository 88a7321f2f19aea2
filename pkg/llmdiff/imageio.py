import numpy as np
import torch
from PIL import Image


def to_uint8(image):
    """Map a [-1, 1] CHW tensor linearly to an HWC uint8 array, clamping out-of-range values."""
    array = image.detach().cpu().to(torch.float64).clamp(-1.0, 1.0).numpy()
    array = np.rint((array + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(array.transpose(1, 2, 0))


def from_uint8(array):
    values = torch.from_numpy(array.transpose(2, 0, 1).astype(np.float32))
    return values / 127.5 - 1.0


def save_ppm(image, filepath):
    """Write a [-1, 1] RGB tensor as a binary (P6) 8-bit PPM."""
    try:
        Image.fromarray(to_uint8(image), mode="RGB").save(filepath, format="PPM")
    except OSError as e:
        raise RuntimeError(f"Failed to save image to {filepath}: {e}")


def load_ppm(filepath):
    """Read a P6 PPM back into a [-1, 1] CHW float32 tensor."""
    with Image.open(filepath) as img:
        return from_uint8(np.asarray(img.convert("RGB")))
