"""Binary checkpoint format: text manifest + flat float64 payload.

Layout::

    tinyembed-ckpt-v1\\n      (versioned magic, byte 0)
    <manifest byte length>\\n  (ascii integer)
    <manifest JSON>            (utf-8, sorted keys)
    <payload>                  (little-endian float64, all tensors back to back)

The manifest records the config snapshots, the step counter, every tensor's
name / shape / element offset in payload order, the PRNG stream states, and
a sha256 of the payload.  Serialization is canonical (sorted JSON keys,
fixed tensor order), so save -> load -> save reproduces the file byte for
byte — which is also what makes resumed runs reproducible.
"""

import hashlib
import json

import numpy as np

from .errors import CheckpointError

MAGIC = b"tinyembed-ckpt-v1\n"


class Checkpoint:
    """In-memory checkpoint: manifest metadata plus name -> float64 arrays."""

    def __init__(self, step, configs, tensors, rng_state):
        self.step = int(step)
        self.configs = configs  # {"model": {...}, "lora": {...}, "train": {...}}
        self.tensors = tensors  # name -> np.ndarray, insertion order = payload order
        self.rng_state = rng_state  # RngStreams.state_dict() output

    def save(self, path):
        names = list(self.tensors)
        payload_parts = []
        index = []
        offset = 0
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payload_parts.append(arr.tobytes())  # C-order float64
            offset += arr.size
        payload = b"".join(payload_parts)
        manifest = {
            "format": "tinyembed-ckpt",
            "version": 1,
            "step": self.step,
            "configs": self.configs,
            "tensors": index,
            "total_elements": offset,
            "rng_state": self.rng_state,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(str(len(blob)).encode("ascii") + b"\n")
            fh.write(blob)
            fh.write(payload)

    @classmethod
    def load(cls, path):
        """Parse and integrity-check a checkpoint file; no partial results."""
        with open(path, "rb") as fh:
            raw = fh.read()
        if not raw.startswith(MAGIC):
            raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
        body = raw[len(MAGIC):]
        newline = body.find(b"\n")
        if newline < 0:
            raise CheckpointError(f"{path}: truncated before manifest length")
        try:
            manifest_len = int(body[:newline])
        except ValueError:
            raise CheckpointError(f"{path}: malformed manifest length") from None
        manifest_start = newline + 1
        manifest_end = manifest_start + manifest_len
        if len(body) < manifest_end:
            raise CheckpointError(f"{path}: truncated inside manifest")
        try:
            manifest = json.loads(body[manifest_start:manifest_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as ex:
            raise CheckpointError(f"{path}: manifest is not valid JSON ({ex})") from None
        if manifest.get("format") != "tinyembed-ckpt" or manifest.get("version") != 1:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        payload = body[manifest_end:]
        expected = manifest["total_elements"] * 8
        if len(payload) != expected:
            raise CheckpointError(
                f"{path}: payload is {len(payload)} bytes, expected {expected} (truncated?)"
            )
        digest = hashlib.sha256(payload).hexdigest()
        if digest != manifest["payload_sha256"]:
            raise CheckpointError(f"{path}: payload checksum mismatch")
        flat = np.frombuffer(payload, dtype="<f8")
        tensors = {}
        for entry in manifest["tensors"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["offset"]
            chunk = flat[start : start + size]
            if chunk.size != size:
                raise CheckpointError(
                    f"{path}: tensor {entry['name']!r} extends past payload end"
                )
            tensors[entry["name"]] = chunk.reshape(entry["shape"]).copy()
        return cls(
            step=manifest["step"],
            configs=manifest["configs"],
            tensors=tensors,
            rng_state=manifest["rng_state"],
        )


def _diff_configs(kind, saved, current):
    """Field-level comparison; returns human-readable mismatch lines."""
    lines = []
    for key in sorted(set(saved) | set(current)):
        a = saved.get(key, "<absent>")
        b = current.get(key, "<absent>")
        if a != b:
            lines.append(f"{kind}.{key}: checkpoint has {a!r}, model has {b!r}")
    return lines


def check_compatible(ckpt, configs, tensor_shapes):
    """Reject a checkpoint that does not match the target model/run.

    ``configs`` maps section name -> dict, ``tensor_shapes`` maps tensor
    name -> tuple shape.  The error message lists every differing field or
    tensor so a mismatch is diagnosable in one read.
    """
    problems = []
    for kind, current in configs.items():
        saved = ckpt.configs.get(kind)
        if saved is None:
            problems.append(f"checkpoint has no {kind!r} config section")
        else:
            problems.extend(_diff_configs(kind, saved, current))
    saved_names = set(ckpt.tensors)
    want_names = set(tensor_shapes)
    for name in sorted(want_names - saved_names):
        problems.append(f"tensor {name!r} missing from checkpoint")
    for name in sorted(saved_names - want_names):
        problems.append(f"checkpoint tensor {name!r} has no target in the model")
    for name in sorted(want_names & saved_names):
        if tuple(ckpt.tensors[name].shape) != tuple(tensor_shapes[name]):
            problems.append(
                f"tensor {name!r}: checkpoint shape {tuple(ckpt.tensors[name].shape)}, "
                f"model shape {tuple(tensor_shapes[name])}"
            )
    if problems:
        raise CheckpointError("checkpoint/model mismatch:\n  " + "\n  ".join(problems))
