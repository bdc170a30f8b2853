"""Small from-scratch CNN classifier and the checkpoint format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "artda-checkpoint"
CHECKPOINT_VERSION = 1


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    # U(-b, b) with b = sqrt(6 / fan_in) has std sqrt(2 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    dtype = dtype or T.get_default_dtype()
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Named parameter container shared by the classifier and the STN."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in state.items():
            arr = np.asarray(arr, dtype=self.params[k].dtype)
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: expected shape {self.params[k].shape}, got {arr.shape}")
            self.params[k].data = arr.copy()

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())


def conv_pool_relu(x, w: Tensor, b: Tensor) -> Tensor:
    h = T.conv2d(x, w, padding="same")
    h = h + T.reshape(b, (1, -1, 1, 1))
    return T.relu(T.max_pool2d(h))


def dense(x, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def check_image_shape(x, expected: tuple[int, int, int], who: str) -> None:
    shape = tuple(x.shape[1:])
    if len(x.shape) != 4 or shape != tuple(expected):
        raise T.ShapeError(f"{who}: expected images of shape (B, {', '.join(map(str, expected))}), "
                           f"got {tuple(x.shape)}")


class Classifier(Module):
    """conv(16)-pool-relu, conv(32)-pool-relu, dense(64)-relu, dense(K)."""

    def __init__(self, num_classes: int, input_shape=(3, 32, 32)):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ValueError(f"input height and width must be multiples of 4, got {h}x{w}")
        self.num_classes = num_classes
        self.input_shape = (c, h, w)
        self.flat = 32 * (h // 4) * (w // 4)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.input_shape[0]
        return {
            "conv1.w": (16, c, 3, 3), "conv1.b": (16,),
            "conv2.w": (32, 16, 3, 3), "conv2.b": (32,),
            "fc1.w": (self.flat, 64), "fc1.b": (64,),
            "fc2.w": (64, self.num_classes), "fc2.b": (self.num_classes,),
        }

    def logits(self, x) -> Tensor:
        check_image_shape(x, self.input_shape, "classifier")
        p = self.params
        h = conv_pool_relu(x, p["conv1.w"], p["conv1.b"])
        h = conv_pool_relu(h, p["conv2.w"], p["conv2.b"])
        h = T.reshape(h, (h.shape[0], self.flat))
        h = T.relu(dense(h, p["fc1.w"], p["fc1.b"]))
        return dense(h, p["fc2.w"], p["fc2.b"])

    def __call__(self, x) -> Tensor:
        return predict_logprobs(x, self)


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_module(module: Module, shapes: dict[str, tuple[int, ...]], rng: np.random.Generator,
                zero: tuple[str, ...] = ()) -> None:
    for name, shape in shapes.items():
        if name.endswith(".b") or name in zero:
            data = np.zeros(shape, dtype=T.get_default_dtype())
        else:
            data = kaiming_uniform(rng, shape, _fan_in(shape))
        module.params[name] = T.parameter(data, name=name)


def init_classifier(seed, num_classes: int, input_shape=(3, 32, 32)) -> Classifier:
    """Kaiming-uniform weights, zero biases; fully determined by ``seed``."""
    clf = Classifier(num_classes, input_shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    init_module(clf, clf.shapes(), rng)
    return clf


def predict_logprobs(x, clf: Classifier) -> Tensor:
    """Per-sample class log-probabilities, shape (B, K)."""
    return T.log_softmax(clf.logits(x), axis=-1)


# checkpoints -------------------------------------------------------------

def save_checkpoint(path, modules: dict[str, Module], meta: dict | None = None) -> None:
    """Write named parameter tensors as JSON (shape + row-major values).

    ``modules`` maps a prefix (``"classifier"``, ``"stn"``) to a module; each
    parameter is stored under ``"<prefix>.<param name>"``.
    """
    params = {}
    for prefix, module in modules.items():
        for name, t in module.params.items():
            params[f"{prefix}.{name}"] = {
                "shape": list(t.shape),
                "data": [float(v) for v in t.data.ravel()],
            }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": str(next(iter(modules.values())).parameters()[0].dtype) if modules else "float32",
        "meta": meta or {},
        "params": params,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict:
    """Parse a checkpoint into ``{"meta": ..., "params": {name: ndarray}}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    dtype = np.dtype(doc.get("dtype", "float32"))
    params = {}
    try:
        for name, entry in doc["params"].items():
            arr = np.asarray(entry["data"], dtype=dtype)
            params[name] = arr.reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed parameter table: {exc}") from exc
    return {"meta": doc.get("meta", {}), "params": params, "dtype": dtype}


def split_params(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def classifier_from_checkpoint(ckpt: dict) -> Classifier:
    meta = ckpt["meta"]
    try:
        clf = Classifier(int(meta["num_classes"]), tuple(meta["input_shape"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint meta lacks {exc}") from None
    with T.default_dtype(ckpt["dtype"]):
        init_module(clf, clf.shapes(), np.random.default_rng(0))
    try:
        clf.load_state_dict(split_params(ckpt["params"], "classifier"))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return clf
