"""Trained classifiers, their on-disk form, and inference."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import synth
from ..config import apply_kv, dump_kv, parse_kv
from .net import build_network, min_side, to_tensor
from .types import FIXED_SIDE, ClassifierSpec, TrainConfig

TASK_CLASSES = {
    "hp": ("HP", "other"),
    "adenoma": ("NORM", "TA", "TVA"),
    "grade": ("HG", "LG"),
}
TASK_POLICY = {"hp": "fixed_224", "adenoma": "fixed_224", "grade": "variable_full_res"}

SPEC_FILE = "spec.json"
WEIGHTS_FILE = "weights.bin"


class TrainedModel:
    """A classifier bound to its :class:`ClassifierSpec`.

    Subclasses implement :meth:`_forward` on a list of validated images.
    """

    kind = "base"

    def __init__(self, spec: ClassifierSpec, training_fingerprint: dict | None = None):
        self.spec = spec
        self.training_fingerprint = training_fingerprint or {}

    @property
    def min_side(self) -> int:
        return 1

    def check_input(self, img: np.ndarray) -> None:
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
        h, w = img.shape[:2]
        if self.spec.input_policy == "fixed_224":
            if (h, w) != (FIXED_SIDE, FIXED_SIDE):
                raise ValueError(f"fixed_224 model got a {w}x{h} image")
        elif min(h, w) < self.min_side:
            raise ValueError(f"input side {min(h, w)} below model minimum {self.min_side}")

    def predict_proba_batch(self, images: Sequence[np.ndarray]) -> np.ndarray:
        for im in images:
            self.check_input(im)
        if not len(images):
            return np.zeros((0, self.spec.n_classes))
        probs = np.asarray(self._forward(list(images)), dtype=np.float64)
        probs = np.clip(probs, 0.0, None)
        return probs / probs.sum(axis=1, keepdims=True)

    def class_index(self, name: str) -> int:
        return self.spec.class_names.index(name)

    def _forward(self, images):
        raise NotImplementedError

    def parameters_blob(self) -> bytes:
        raise NotImplementedError


def predict_proba(model: TrainedModel, img: np.ndarray) -> np.ndarray:
    """Class probabilities for one image; non-negative and summing to one."""
    return model.predict_proba_batch([img])[0]


# -- network-backed models -------------------------------------------------

class NetModel(TrainedModel):
    kind = "network"

    def __init__(self, spec: ClassifierSpec, network: torch.nn.Module,
                 training_fingerprint: dict | None = None, history: list | None = None):
        super().__init__(spec, training_fingerprint)
        self.network = network.eval()
        self.history = history or []

    @property
    def min_side(self) -> int:
        return min_side(self.spec.arch)

    @torch.no_grad()
    def _forward(self, images, batch_size: int = 64):
        self.network.eval()
        # group equal shapes so full-resolution inputs of mixed size still batch
        order = sorted(range(len(images)), key=lambda i: images[i].shape)
        probs = [None] * len(images)
        i = 0
        while i < len(order):
            shape = images[order[i]].shape
            j = i
            while j < len(order) and j - i < batch_size and images[order[j]].shape == shape:
                j += 1
            idx = order[i:j]
            logits = self.network(to_tensor([images[k] for k in idx]))
            p = torch.softmax(logits.double(), dim=1).numpy()
            for k, row in zip(idx, p):
                probs[k] = row
            i = j
        return np.stack(probs)

    def parameters_blob(self) -> bytes:
        state = self.network.state_dict()
        return b"".join(t.detach().cpu().contiguous().numpy().tobytes() for t in state.values())

    def state_layout(self) -> list[dict]:
        return [{"name": k, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
                for k, t in self.network.state_dict().items()]


def _load_state(network: torch.nn.Module, layout: list[dict], blob: bytes) -> None:
    state = {}
    off = 0
    for entry in layout:
        dtype = np.dtype(entry["dtype"])
        count = math.prod(entry["shape"])
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(entry["shape"])
        off += count * dtype.itemsize
        state[entry["name"]] = torch.from_numpy(arr.copy())
    if off != len(blob):
        raise ValueError("weights blob size does not match the recorded layout")
    network.load_state_dict(state)


# -- mock oracles ----------------------------------------------------------

def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


class OracleModel(TrainedModel):
    """Reads a synthetic cue directly instead of learning it.

    Emits near-one-hot probabilities when its cue is legible in the input
    and the uniform distribution when it is not (wrong scale).
    """

    kind = "oracle"

    def __init__(self, task: str, generator_params: synth.SynthConfig):
        if task not in TASK_CLASSES:
            raise ValueError(f"unknown oracle task {task!r}")
        names = TASK_CLASSES[task]
        spec = ClassifierSpec(len(names), TASK_POLICY[task], False, task, names, "oracle")
        super().__init__(spec, {"generator": dump_kv(generator_params)})
        self.task = task
        self.params = generator_params

    def _one(self, img) -> np.ndarray:
        cfg = self.params
        n = self.spec.n_classes
        uniform = np.full(n, 1.0 / n)
        if self.task == "hp":
            sx, sy = synth.stripe_energy(img)
            if sx + sy < cfg.stripe_amplitude / 8:
                return uniform
            p = _sigmoid(12.0 * (sx - sy) / (sx + sy))
            return np.array([p, 1.0 - p])
        if self.task == "adenoma":
            kind = synth.shape_type(img, cfg)
            if kind is None:
                return uniform
            out = np.full(3, 0.005)
            out[TASK_CLASSES["adenoma"].index(kind)] = 0.99
            return out
        density = synth.dot_density(img, cfg)
        if density < cfg.lg_band[0] / 2:
            return uniform
        scale = (cfg.hg_band[0] - cfg.lg_band[1]) / 20
        p = _sigmoid((density - cfg.grade_boundary) / scale)
        return np.array([p, 1.0 - p])

    def _forward(self, images):
        return np.stack([self._one(im) for im in images])

    def parameters_blob(self) -> bytes:
        return dump_kv(self.params).encode("utf-8")


def mock_oracle_backbone(task: str, generator_params: synth.SynthConfig) -> OracleModel:
    return OracleModel(task, generator_params)


# -- persistence -----------------------------------------------------------

def save_model(model: TrainedModel, directory: str | Path) -> Path:
    """Write ``spec.json`` and ``weights.bin`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = model.parameters_blob()
    meta = {
        "kind": model.kind,
        "spec": model.spec.to_dict(),
        "training_fingerprint": model.training_fingerprint,
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if isinstance(model, NetModel):
        meta["layout"] = model.state_layout()
        meta["history"] = model.history
    if isinstance(model, OracleModel):
        meta["task"] = model.task
    (d / SPEC_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
    (d / WEIGHTS_FILE).write_bytes(blob)
    return d


def load_model(directory: str | Path) -> TrainedModel:
    d = Path(directory)
    spec_path = d / SPEC_FILE
    if not spec_path.exists():
        raise FileNotFoundError(f"no model at {d} (missing {SPEC_FILE})")
    meta = json.loads(spec_path.read_text(encoding="utf-8"))
    blob = (d / WEIGHTS_FILE).read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["weights_sha256"]:
        raise ValueError(f"{d / WEIGHTS_FILE} does not match its recorded checksum")
    if meta["kind"] == "oracle":
        params = apply_kv(synth.SynthConfig(), parse_kv(blob.decode("utf-8")))
        return OracleModel(meta["task"], params)
    spec = ClassifierSpec.from_dict(meta["spec"])
    net = build_network(spec.arch, spec.n_classes, pretrained=False)
    _load_state(net, meta["layout"], blob)
    return NetModel(spec, net, meta.get("training_fingerprint"), meta.get("history"))


def train_config_of(model: TrainedModel) -> TrainConfig | None:
    cfg = model.training_fingerprint.get("train_config")
    return TrainConfig.from_dict(cfg) if cfg else None
