import io
import logging
import os
from typing import List, Sequence

import numpy as np
import pandas as pd
from PIL import Image

from src.dataio.preparation import SampleRecord, make_record, normalise_depths
from src.dataio.rle import decode_rle, encode_rle

logger = logging.getLogger(__name__)

TRAIN_CSV = "train.csv"
DEPTHS_CSV = "depths.csv"
IMAGES_DIR = "images"
IMAGE_EXTENSIONS = (".png", ".pgm")


class DataExtractor:
    """
    Reads a salt corpus laid out as the public competition data: `train.csv` (id,rle_mask),
    `depths.csv` (id,z) and `images/<id>.png` (8-bit grayscale; `.pgm` accepted as well).

    Attributes:
        root (str): Corpus directory.
    """

    def __init__(self, root: str):
        self.root = root

    def read_train_csv(self) -> pd.DataFrame:
        """
        Reads the mask labels.

        Returns:
            pd.DataFrame: Columns id and rle_mask; missing labels become "".

        Raises:
            FileNotFoundError: If train.csv is missing.
        """
        df = pd.read_csv(os.path.join(self.root, TRAIN_CSV), dtype={"id": str, "rle_mask": str})
        df["rle_mask"] = df["rle_mask"].fillna("")
        return df

    def read_depths_csv(self) -> pd.DataFrame:
        """
        Reads the per-image depths in feet.

        Returns:
            pd.DataFrame: Columns id and z.
        """
        df = pd.read_csv(os.path.join(self.root, DEPTHS_CSV), dtype={"id": str})
        df["z"] = pd.to_numeric(df["z"], errors="coerce")
        return df.dropna(subset=["z"])

    def image_path(self, sample_id: str) -> str:
        for extension in IMAGE_EXTENSIONS:
            path = os.path.join(self.root, IMAGES_DIR, f"{sample_id}{extension}")
            if os.path.exists(path):
                return path
        raise FileNotFoundError(f"No image for sample '{sample_id}' under {os.path.join(self.root, IMAGES_DIR)}")

    def read_image(self, sample_id: str) -> np.ndarray:
        """Loads an image as a float array in [0, 1]."""
        with Image.open(self.image_path(sample_id)) as img:
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0

    def load_corpus(self) -> List[SampleRecord]:
        """
        Joins labels, depths and images into records. Samples without a depth row are skipped
        with a warning.

        Returns:
            list[SampleRecord]: Records in train.csv order with depths normalised by the corpus max.

        Raises:
            FileNotFoundError: If a CSV or an image is missing.
            src.errors.RleParseError: If a label is malformed.
        """
        labels = self.read_train_csv()
        depths = self.read_depths_csv().set_index("id")["z"]
        records = []
        for sample_id, rle in zip(labels["id"], labels["rle_mask"]):
            if sample_id not in depths.index:
                logger.warning(f"Sample '{sample_id}' has no depth entry, skipping")
                continue
            image = self.read_image(sample_id)
            mask = decode_rle(rle, *image.shape)
            records.append(make_record(sample_id, image, mask, 0.0, float(depths[sample_id])))
        normalise_depths(records)
        logger.info(f"Loaded {len(records)} samples from {self.root}")
        return records


def export_corpus(records: Sequence[SampleRecord], out_dir: str) -> None:
    """
    Writes records in the competition layout with PGM images.

    Args:
        records (Sequence[SampleRecord]): Samples to export.
        out_dir (str): Target directory, created when missing.
    """
    os.makedirs(os.path.join(out_dir, IMAGES_DIR), exist_ok=True)
    pd.DataFrame({"id": [r.id for r in records],
                  "rle_mask": [encode_rle(r.mask) for r in records]}).to_csv(
        os.path.join(out_dir, TRAIN_CSV), index=False)
    pd.DataFrame({"id": [r.id for r in records],
                  "z": [int(round(r.depth_feet)) for r in records]}).to_csv(
        os.path.join(out_dir, DEPTHS_CSV), index=False)
    for record in records:
        path = os.path.join(out_dir, IMAGES_DIR, f"{record.id}.pgm")
        Image.fromarray(to_uint8(record.image)).save(path, format="PPM")
    logger.info(f"Exported {len(records)} samples to {out_dir}")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def read_pgm_bytes(data: bytes) -> np.ndarray:
    """Decodes PGM (or PNG) bytes into a uint8 array."""
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def write_pgm_bytes(pixels: np.ndarray) -> bytes:
    """Encodes a uint8 array as binary PGM."""
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buffer, format="PPM")
    return buffer.getvalue()
