"""Single-file checkpoint container: JSON manifest + named weight blobs.

Layout: a zip archive holding manifest.json and arrays/<name>.npy. The
manifest must carry a "version" field. Module weights round-trip
bit-identically (dtype and bits preserved by the .npy encoding).
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

FORMAT_VERSION = 1


def save_checkpoint(path, manifest: dict, arrays: dict) -> None:
    if "version" not in manifest:
        manifest = {"version": FORMAT_VERSION, **manifest}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]))
            zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path):
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if "version" not in manifest:
            raise ValueError("checkpoint manifest has no version field")
        arrays = {}
        for info in zf.infolist():
            if info.filename.startswith("arrays/") and info.filename.endswith(".npy"):
                name = info.filename[len("arrays/"):-len(".npy")]
                arrays[name] = np.load(io.BytesIO(zf.read(info.filename)))
    return manifest, arrays


def module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    """Flatten a module's state dict (parameters and buffers) into named arrays."""
    out = {}
    for key, tensor in module.state_dict().items():
        out[f"{prefix}/{key}"] = tensor.detach().cpu().numpy()
    return out


def load_module(module: torch.nn.Module, prefix: str, arrays: dict) -> None:
    state = {}
    plen = len(prefix) + 1
    for name, arr in arrays.items():
        if name.startswith(prefix + "/"):
            state[name[plen:]] = torch.from_numpy(np.array(arr))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing keys under '{prefix}': {sorted(missing)[:5]}")
    module.load_state_dict(state)
