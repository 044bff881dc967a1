"""
Neural re-rankers over the cross-lingual similarity matrix
KNRM, ConvKNRM and MatchPyramid, built from autodiff_engine primitives
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
import autodiff_engine as ad
from autodiff_engine import Tape, Tensor
from errors import ContractError, EmptyInputError, ParseError

logger = logging.getLogger(__name__)

# Score assigned to candidates with no usable query or document tokens
NEURAL_SENTINEL = -math.inf


class RankerArchitecture(Enum):
    KNRM = "knrm"
    CONVKNRM = "convknrm"
    MATCHPYRAMID = "matchpyramid"

    @property
    def label(self) -> str:
        return {"knrm": "KNRM", "convknrm": "ConvKNRM", "matchpyramid": "MatchPyramid"}[self.value]


@dataclass(frozen=True)
class KernelBank:
    mus: Tuple[float, ...]
    sigmas: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mus", tuple(float(mu) for mu in self.mus))
        object.__setattr__(self, "sigmas", tuple(float(sigma) for sigma in self.sigmas))
        if len(self.mus) != len(self.sigmas) or not self.mus:
            raise ContractError(f"KernelBank: {len(self.mus)} means for {len(self.sigmas)} widths")
        if any(not sigma > 0 for sigma in self.sigmas):
            raise ContractError(f"KernelBank: widths must be > 0, got {self.sigmas}")

    def __len__(self) -> int:
        return len(self.mus)

    @classmethod
    def default(cls) -> "KernelBank":
        """Exact-match kernel at 1.0 plus ten soft-match kernels from -0.9 to 0.9"""
        soft = [round(-0.9 + 0.2 * i, 10) for i in range(10)]
        return cls(mus=(1.0, *soft), sigmas=(1e-3,) + (0.1,) * 10)

    def to_dict(self) -> dict:
        return {"mus": list(self.mus), "sigmas": list(self.sigmas)}


DEFAULT_BANK = KernelBank.default()


# Parameter containers

@dataclass
class KNRMParams:
    w: np.ndarray
    b: float = 0.0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"w": np.asarray(self.w, dtype=np.float64), "b": np.asarray(self.b, dtype=np.float64)}


@dataclass
class ConvKNRMParams:
    filters: Dict[int, np.ndarray]  # order -> (F, order, D)
    biases: Dict[int, np.ndarray]  # order -> (F,)
    w: np.ndarray
    b: float = 0.0

    @property
    def orders(self) -> Tuple[int, ...]:
        return tuple(sorted(self.filters))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for order in self.orders:
            arrays[f"conv{order}.filters"] = np.asarray(self.filters[order], dtype=np.float64)
            arrays[f"conv{order}.bias"] = np.asarray(self.biases[order], dtype=np.float64)
        arrays["w"] = np.asarray(self.w, dtype=np.float64)
        arrays["b"] = np.asarray(self.b, dtype=np.float64)
        return arrays


@dataclass
class MatchPyramidParams:
    filters: List[np.ndarray]  # layer -> (16, C_in, 3, 3)
    biases: List[np.ndarray]
    dense_w: np.ndarray
    dense_b: float = 0.0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for layer, (filters, bias) in enumerate(zip(self.filters, self.biases)):
            arrays[f"conv{layer}.filters"] = np.asarray(filters, dtype=np.float64)
            arrays[f"conv{layer}.bias"] = np.asarray(bias, dtype=np.float64)
        arrays["dense.w"] = np.asarray(self.dense_w, dtype=np.float64)
        arrays["dense.b"] = np.asarray(self.dense_b, dtype=np.float64)
        return arrays


# Shared building blocks

def kernel_pool_tensor(M: Tensor, bank: KernelBank) -> Tensor:
    """phi_k = sum_i log(max(1e-10, sum_j exp(-(M_ij - mu_k)^2 / (2 sigma_k^2))))"""
    responses = ad.rbf_kernels(M, bank.mus, bank.sigmas)  # (K, n, m)
    soft_tf = ad.reduce_sum(responses, axis=2)  # (K, n)
    return ad.reduce_sum(ad.log(soft_tf), axis=1)


def _check_embedded(q_emb: np.ndarray, d_emb: np.ndarray):
    q_emb, d_emb = np.asarray(q_emb, dtype=np.float64), np.asarray(d_emb, dtype=np.float64)
    if q_emb.ndim != 2 or d_emb.ndim != 2:
        raise ContractError(f"expected token matrices, got {q_emb.shape} and {d_emb.shape}")
    if q_emb.shape[0] == 0 or d_emb.shape[0] == 0:
        raise EmptyInputError(f"empty similarity input: {q_emb.shape[0]} query x {d_emb.shape[0]} doc tokens")
    if q_emb.shape[1] != d_emb.shape[1]:
        raise ContractError(f"embedding dimensions differ: {q_emb.shape[1]} vs {d_emb.shape[1]}")
    return q_emb, d_emb


def sim_matrix(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Cosine similarity of every (query token, doc token) pair"""
    q, d = _check_embedded(q, d)
    tape = Tape()
    return ad.cosine_matrix(tape.constant(q), tape.constant(d)).data


def kernel_pool(M: np.ndarray, bank: KernelBank = DEFAULT_BANK) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] == 0 or M.shape[1] == 0:
        raise EmptyInputError(f"kernel_pool: empty similarity matrix {M.shape}")
    return kernel_pool_tensor(Tape().constant(M), bank).data


class NeuralRanker:
    """Base ranker: named parameter shapes, seeded init, per-pair prepare + forward.

    prepare() turns embedded query/doc tokens into whatever the forward pass
    consumes and is parameter independent, so trainers may cache it.
    """

    architecture: RankerArchitecture

    def __init__(self, bank: KernelBank = DEFAULT_BANK):
        self.bank = bank

    def hyperparameters(self) -> dict:
        return {}

    def parameter_shapes(self, dim: int) -> Dict[str, Tuple[int, ...]]:
        raise NotImplementedError

    def _zero_initialized(self, name: str) -> bool:
        return False

    def init_params(self, dim: int, rng: np.random.Generator,
                    scale: float = config.INIT_SCALE) -> Dict[str, np.ndarray]:
        params = {}
        for name, shape in self.parameter_shapes(dim).items():
            if self._zero_initialized(name):
                params[name] = np.zeros(shape)
            else:
                params[name] = np.asarray(rng.uniform(-scale, scale, size=shape), dtype=np.float64)
        return params

    def prepare(self, q_emb: np.ndarray, d_emb: np.ndarray):
        raise NotImplementedError

    def forward(self, tape: Tape, tensors: Dict[str, Tensor], inputs) -> Tensor:
        raise NotImplementedError

    def score(self, params: Dict[str, np.ndarray], inputs) -> float:
        """Frozen-parameter forward pass; nothing is recorded for backward"""
        tape = Tape()
        tensors = {name: tape.constant(value) for name, value in params.items()}
        return self.forward(tape, tensors, inputs).item()

    def score_pair(self, params: Dict[str, np.ndarray], q_emb: np.ndarray, d_emb: np.ndarray) -> float:
        try:
            return self.score(params, self.prepare(q_emb, d_emb))
        except EmptyInputError:
            return NEURAL_SENTINEL


class KNRMRanker(NeuralRanker):
    architecture = RankerArchitecture.KNRM

    def parameter_shapes(self, dim: int) -> Dict[str, Tuple[int, ...]]:
        return {"w": (len(self.bank),), "b": ()}

    def prepare(self, q_emb, d_emb) -> np.ndarray:
        # kernel features do not depend on w or b
        return kernel_pool(sim_matrix(q_emb, d_emb), self.bank)

    def forward(self, tape, tensors, inputs) -> Tensor:
        return ad.tanh(ad.affine(tape.constant(inputs), tensors["w"], tensors["b"]))


class ConvKNRMRanker(NeuralRanker):
    architecture = RankerArchitecture.CONVKNRM

    def __init__(self, bank: KernelBank = DEFAULT_BANK, orders: Sequence[int] = config.CONVKNRM_ORDERS,
                 filters: int = config.CONVKNRM_FILTERS):
        super().__init__(bank)
        self.orders = tuple(sorted(int(order) for order in orders))
        self.filters = int(filters)
        if not self.orders or self.orders[0] < 1 or self.filters < 1:
            raise ContractError(f"ConvKNRM: invalid orders {orders} or filter count {filters}")

    def hyperparameters(self) -> dict:
        return {"orders": list(self.orders), "filters": self.filters}

    def parameter_shapes(self, dim: int) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for order in self.orders:
            shapes[f"conv{order}.filters"] = (self.filters, order, dim)
            shapes[f"conv{order}.bias"] = (self.filters,)
        shapes["w"] = (len(self.bank) * len(self.orders) ** 2,)
        shapes["b"] = ()
        return shapes

    def _zero_initialized(self, name: str) -> bool:
        return name.endswith(".bias")

    def prepare(self, q_emb, d_emb):
        q_emb, d_emb = _check_embedded(q_emb, d_emb)
        shortest = min(q_emb.shape[0], d_emb.shape[0])
        if self.orders[0] > shortest:
            raise EmptyInputError(f"ConvKNRM: no n-gram order in {self.orders} fits {shortest} tokens")
        return q_emb, d_emb

    def _ngrams(self, tensors, x: Tensor) -> Dict[int, Tensor]:
        composed = {}
        for order in self.orders:
            if x.shape[0] >= order:
                composed[order] = ad.relu(ad.conv1d(x, tensors[f"conv{order}.filters"], tensors[f"conv{order}.bias"]))
        return composed

    def forward(self, tape, tensors, inputs) -> Tensor:
        q_emb, d_emb = inputs
        q_grams = self._ngrams(tensors, tape.constant(q_emb))
        d_grams = self._ngrams(tensors, tape.constant(d_emb))
        features = []
        for q_order in self.orders:
            for d_order in self.orders:
                if q_order in q_grams and d_order in d_grams:
                    M = ad.cosine_matrix(q_grams[q_order], d_grams[d_order])
                    features.append(kernel_pool_tensor(M, self.bank))
                else:
                    features.append(tape.constant(np.zeros(len(self.bank))))
        return ad.tanh(ad.affine(ad.concat(features), tensors["w"], tensors["b"]))


class MatchPyramidRanker(NeuralRanker):
    architecture = RankerArchitecture.MATCHPYRAMID

    MIN_CANVAS = 22

    def __init__(self, bank: KernelBank = DEFAULT_BANK, canvas: Tuple[int, int] = config.MATCHPYRAMID_CANVAS,
                 channels: int = config.MATCHPYRAMID_CHANNELS, layers: int = config.MATCHPYRAMID_LAYERS,
                 pooled_grid: Tuple[int, int] = config.MATCHPYRAMID_POOLED_GRID):
        super().__init__(bank)
        self.canvas = (int(canvas[0]), int(canvas[1]))
        self.channels = int(channels)
        self.layers = int(layers)
        self.pooled_grid = (int(pooled_grid[0]), int(pooled_grid[1]))
        if min(self.canvas) < self.MIN_CANVAS:
            raise ContractError(f"MatchPyramid: canvas {self.canvas} is below {self.MIN_CANVAS}x{self.MIN_CANVAS}")

    def hyperparameters(self) -> dict:
        return {
            "canvas": list(self.canvas),
            "channels": self.channels,
            "layers": self.layers,
            "pooled_grid": list(self.pooled_grid),
        }

    def parameter_shapes(self, dim: int) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        in_channels = 1
        for layer in range(self.layers):
            shapes[f"conv{layer}.filters"] = (self.channels, in_channels, 3, 3)
            shapes[f"conv{layer}.bias"] = (self.channels,)
            in_channels = self.channels
        shapes["dense.w"] = (self.channels * self.pooled_grid[0] * self.pooled_grid[1],)
        shapes["dense.b"] = ()
        return shapes

    def _zero_initialized(self, name: str) -> bool:
        return name.startswith("conv") and name.endswith(".bias")

    def prepare(self, q_emb, d_emb) -> np.ndarray:
        return sim_matrix(q_emb, d_emb)

    def forward(self, tape, tensors, inputs) -> Tensor:
        image = ad.pad2d(tape.constant(inputs), self.canvas)
        x = ad.reshape(image, (1,) + self.canvas)
        for layer in range(self.layers):
            x = ad.conv2d(x, tensors[f"conv{layer}.filters"], tensors[f"conv{layer}.bias"])
            x = ad.maxpool2d(ad.relu(x), (2, 2))
        pooled = ad.adaptive_maxpool2d(x, self.pooled_grid)
        flat = ad.reshape(pooled, (pooled.data.size,))
        return ad.affine(flat, tensors["dense.w"], tensors["dense.b"])


def build_ranker(architecture: RankerArchitecture, bank: KernelBank = DEFAULT_BANK,
                 hyperparameters: Optional[dict] = None) -> NeuralRanker:
    architecture = RankerArchitecture(architecture)
    hyperparameters = hyperparameters or {}
    if architecture == RankerArchitecture.KNRM:
        return KNRMRanker(bank)
    if architecture == RankerArchitecture.CONVKNRM:
        return ConvKNRMRanker(bank, **hyperparameters)
    return MatchPyramidRanker(bank, **hyperparameters)


# Scoring functions over the parameter containers

def knrm_score(p: KNRMParams, M: np.ndarray, bank: KernelBank = DEFAULT_BANK) -> float:
    ranker = KNRMRanker(bank)
    return ranker.score(p.to_arrays(), kernel_pool(M, bank))


def convknrm_score(p: ConvKNRMParams, q_emb: np.ndarray, d_emb: np.ndarray,
                   bank: KernelBank = DEFAULT_BANK) -> float:
    any_filters = next(iter(p.filters.values()))
    ranker = ConvKNRMRanker(bank, orders=p.orders, filters=any_filters.shape[0])
    return ranker.score(p.to_arrays(), ranker.prepare(q_emb, d_emb))


def matchpyramid_score(p: MatchPyramidParams, M: np.ndarray,
                       canvas: Tuple[int, int] = config.MATCHPYRAMID_CANVAS,
                       pooled_grid: Tuple[int, int] = config.MATCHPYRAMID_POOLED_GRID) -> float:
    ranker = MatchPyramidRanker(canvas=canvas, channels=p.filters[0].shape[0], layers=len(p.filters),
                                pooled_grid=pooled_grid)
    return ranker.score(p.to_arrays(), np.asarray(M, dtype=np.float64))


# Ranker checkpoints

@dataclass
class Checkpoint:
    architecture: RankerArchitecture
    epoch: int
    params: Dict[str, np.ndarray]
    kernel_bank: KernelBank = DEFAULT_BANK
    hyperparameters: dict = field(default_factory=dict)
    val_loss: Optional[float] = None

    def ranker(self) -> NeuralRanker:
        return build_ranker(self.architecture, self.kernel_bank, self.hyperparameters)


def save_checkpoint(path: str, checkpoint: Checkpoint):
    metadata = {
        "architecture": checkpoint.architecture.value,
        "epoch": checkpoint.epoch,
        "kernel_bank": checkpoint.kernel_bank.to_dict(),
        "hyperparameters": checkpoint.hyperparameters,
    }
    if checkpoint.val_loss is not None and math.isfinite(checkpoint.val_loss):
        metadata["val_loss"] = checkpoint.val_loss
    ad.save_parameters(path, checkpoint.params, metadata)


def load_checkpoint(path: str) -> Checkpoint:
    params, metadata = ad.load_parameters(path)
    try:
        architecture = RankerArchitecture(metadata["architecture"])
        bank = KernelBank(**metadata["kernel_bank"])
        epoch = int(metadata["epoch"])
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(f"incomplete checkpoint metadata: {e}", path)
    logger.info(f"Loaded {architecture.label} checkpoint from epoch {epoch}: {path}")
    return Checkpoint(
        architecture=architecture,
        epoch=epoch,
        params=params,
        kernel_bank=bank,
        hyperparameters=metadata.get("hyperparameters", {}),
        val_loss=metadata.get("val_loss"),
    )
