"""Exact and perceptual image hashing for duplicate removal.

The perceptual hash is the classic DCT construction: grayscale, 32x32
resize, 2-D DCT, the top-left 8x8 coefficient block thresholded against the
median of its AC coefficients. Near-duplicates (recompression, mild
filtering) land within a small Hamming radius; unrelated images are
expected near 32/64 bits apart.
"""

from __future__ import annotations

import hashlib
import threading

import cv2
import numpy as np

from ..images import ImageTensor

PHASH_RADIUS_DEFAULT = 4


def md5_hex(image: ImageTensor) -> str:
    """MD5 over the 8-bit pixel buffer (shape-prefixed)."""
    arr = image.to_hwc_uint8()
    h = hashlib.md5()
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(arr.tobytes())
    return h.hexdigest()


def phash(image: ImageTensor) -> int:
    """64-bit DCT perceptual hash."""
    hwc = image.to_hwc_uint8()
    gray = cv2.cvtColor(hwc, cv2.COLOR_RGB2GRAY)
    small = cv2.resize(gray, (32, 32), interpolation=cv2.INTER_AREA)
    coeffs = cv2.dct(small.astype(np.float64))
    block = coeffs[:8, :8].ravel()
    median = np.median(block[1:])  # AC coefficients only
    bits = block > median
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


class DedupIndex:
    """Duplicate detector over exact MD5 digests and pHash neighborhoods.

    ``check_insert`` is atomic: concurrent callers see linearizable
    duplicate decisions.
    """

    def __init__(self, phash_radius: int = PHASH_RADIUS_DEFAULT):
        self.phash_radius = int(phash_radius)
        self._md5: set[str] = set()
        self._phashes: list[int] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._md5)

    def _is_duplicate(self, digest: str, perceptual: int) -> bool:
        if digest in self._md5:
            return True
        return any(hamming(perceptual, other) <= self.phash_radius
                   for other in self._phashes)

    def check_insert(self, image: ImageTensor) -> str:
        """Returns "duplicate" or "inserted"; inserts only when new."""
        digest = md5_hex(image)
        perceptual = phash(image)
        with self._lock:
            if self._is_duplicate(digest, perceptual):
                return "duplicate"
            self._md5.add(digest)
            self._phashes.append(perceptual)
            return "inserted"


def dedup_check_insert(index: DedupIndex, image: ImageTensor) -> str:
    return index.check_insert(image)
