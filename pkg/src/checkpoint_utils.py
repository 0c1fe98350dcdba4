import json
import logging
import os
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "checkpoint.bin"
VALUE_DTYPE = "<f8"


class CheckpointStore:
    """
    Stores model parameters as a JSON manifest (names, shapes, groups in order) plus a flat
    little-endian float64 binary holding the values in manifest order.

    Attributes:
        directory (str): Folder holding manifest.json and checkpoint.bin.
    """

    def __init__(self, directory: str):
        self.directory = directory

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.directory, MANIFEST_FILE)

    @property
    def binary_path(self) -> str:
        return os.path.join(self.directory, CHECKPOINT_FILE)

    def save(self, model) -> None:
        """
        Writes every parameter of model.

        Args:
            model (SegModel): Model whose parameters are stored.
        """
        os.makedirs(self.directory, exist_ok=True)
        entries = [{"name": p.name, "shape": list(p.values.shape), "group": p.group}
                   for p in model.parameters()]
        with open(self.manifest_path, "w") as f:
            json.dump({"dtype": VALUE_DTYPE, "parameters": entries}, f, indent=2)
        with open(self.binary_path, "wb") as f:
            for param in model.parameters():
                f.write(np.ascontiguousarray(param.values, dtype=VALUE_DTYPE).tobytes())
        logger.info(f"Saved {len(entries)} parameters to {self.directory}")

    def load(self) -> Dict[str, Tuple[np.ndarray, str]]:
        """
        Reads the checkpoint back.

        Returns:
            dict[str, tuple[np.ndarray, str]]: Name to (values, group), in manifest order.

        Raises:
            ValueError: If the binary size does not match the manifest.
        """
        with open(self.manifest_path, "r") as f:
            manifest = json.load(f)
        flat = np.fromfile(self.binary_path, dtype=manifest.get("dtype", VALUE_DTYPE))
        expected = sum(int(np.prod(e["shape"])) for e in manifest["parameters"])
        if flat.size != expected:
            raise ValueError(f"Checkpoint holds {flat.size} values, manifest describes {expected}")
        out, offset = {}, 0
        for entry in manifest["parameters"]:
            size = int(np.prod(entry["shape"]))
            out[entry["name"]] = (flat[offset:offset + size].reshape(entry["shape"]).astype(np.float64), entry["group"])
            offset += size
        return out

    def restore(self, model) -> None:
        """
        Copies stored values into a built model.

        Raises:
            KeyError: If the model has a parameter the checkpoint lacks.
            ValueError: On a shape mismatch.
        """
        stored = self.load()
        for name, param in model.named_parameters().items():
            if name not in stored:
                raise KeyError(f"Checkpoint has no parameter '{name}'")
            values, _ = stored[name]
            if values.shape != param.values.shape:
                raise ValueError(f"Shape mismatch for '{name}': {values.shape} vs {param.values.shape}")
            param.node.values = values.copy()


def write_json(path: str, payload: dict) -> None:
    """Writes a run report with sorted keys so reruns are byte-identical."""
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
