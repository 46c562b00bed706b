"""
Message-passing regression networks on region graphs.

Four layer types (GCN, GIN, GraphSAGE with mean aggregation, GATv2) feed a
linear head that predicts one value per region. Training is full-graph,
loss is masked MSE, gradients come from `autodiff`, and parameters are
updated with SGD, RMSprop or Adam.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

import artifacts
from autodiff import Tensor, concat, dropout, scatter_rows_sum, segment_softmax, sparse_matmul
from errors import (EmptyMask, EmptyTrainMask, InputFileNotFound, InvalidConfig, LeakageDetected,
                    NonConvergence, ShapeMismatch, UntrainedModel)
from geo_graph import RegionGraph

logger = logging.getLogger(__name__)

ARCHITECTURES = ('gcn', 'gin', 'graphsage', 'gatv2')
ACTIVATIONS = ('relu', 'leaky_relu')
OPTIMIZERS = ('adam', 'sgd', 'rmsprop')

ADAM_BETAS = (0.9, 0.999)
RMSPROP_DECAY = 0.99
OPTIMIZER_EPS = 1e-8


@dataclass
class ModelSpec:
    architecture: str = 'gatv2'
    depth: int = 2
    hidden1: int = 128
    hidden2: int = 64
    dropout: float = 0.3
    activation: str = 'relu'
    gin_epsilon_init: float = 0.0
    sage_aggregator: str = 'mean'
    gat_heads: int = 1
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise InvalidConfig(f"Unknown architecture {self.architecture!r} (expected one of {ARCHITECTURES})")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"Unknown activation {self.activation!r}")
        if self.sage_aggregator != 'mean':
            raise InvalidConfig(f"Only the mean aggregator is supported, got {self.sage_aggregator!r}")
        if self.depth < 1 or self.hidden1 < 1 or self.hidden2 < 1 or self.gat_heads < 1:
            raise InvalidConfig("depth, hidden sizes and head count must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"dropout must lie in [0, 1), got {self.dropout}")

    def layer_widths(self) -> List[int]:
        """hidden1 for every layer but the last, which uses hidden2"""
        return [self.hidden1] * (self.depth - 1) + [self.hidden2]


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 5e-4
    optimizer: str = 'adam'
    epochs: int = 300
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"Unknown optimizer {self.optimizer!r} (expected one of {OPTIMIZERS})")
        if self.lr <= 0 or self.epochs < 1 or self.patience < 1 or self.weight_decay < 0:
            raise InvalidConfig("lr must be positive, epochs and patience at least 1, weight_decay >= 0")


@dataclass
class GraphOperators:
    """Per-graph constants shared by every layer"""
    n_nodes: int
    adjacency: sp.csr_matrix
    normalized: sp.csr_matrix
    mean_aggregator: sp.csr_matrix
    edge_src: np.ndarray
    edge_dst: np.ndarray
    segment_starts: np.ndarray


@dataclass
class TrainedModel:
    spec: ModelSpec
    parameters: Dict[str, np.ndarray]
    in_dim: int
    seed: int
    train_config: Optional[TrainConfig] = None
    training_log: List[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    _operator_cache: Optional[Tuple[RegionGraph, GraphOperators]] = field(default=None, repr=False)

    def operators_for(self, graph: RegionGraph) -> GraphOperators:
        if self._operator_cache is None or self._operator_cache[0] is not graph:
            self._operator_cache = (graph, graph_operators(graph))
        return self._operator_cache[1]

    @property
    def trained(self) -> bool:
        return bool(self.training_log)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.training_log, columns=['epoch', 'train_loss', 'val_loss'])


@dataclass
class OptimizerState:
    name: str
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ForwardResult:
    predictions: Tensor
    embeddings: Tensor


# === GRAPH OPERATORS ===

def normalize_adjacency(graph: RegionGraph) -> sp.csr_matrix:
    """D~^-1/2 (A + I) D~^-1/2"""
    looped = (graph.adjacency + sp.identity(graph.n_nodes, format='csr')).tocsr()
    inv_sqrt = 1.0 / np.sqrt(np.asarray(looped.sum(axis=1)).ravel())
    return (sp.diags(inv_sqrt) @ looped @ sp.diags(inv_sqrt)).tocsr()


def graph_operators(graph: RegionGraph) -> GraphOperators:
    n = graph.n_nodes
    adjacency = graph.adjacency
    degrees = graph.degrees
    inverse = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
    # rows are targets, columns sources; the self-loop keeps every segment nonempty
    looped = (adjacency + sp.identity(n, format='csr')).tocsr()
    looped.sort_indices()
    counts = np.diff(looped.indptr)
    return GraphOperators(
        n_nodes=n,
        adjacency=adjacency,
        normalized=normalize_adjacency(graph),
        mean_aggregator=(sp.diags(inverse) @ adjacency).tocsr(),
        edge_src=looped.indices.astype(np.int64),
        edge_dst=np.repeat(np.arange(n, dtype=np.int64), counts),
        segment_starts=looped.indptr[:-1].astype(np.int64),
    )


# === LAYERS ===

def _activate(h: Tensor, activation: Optional[str], slope: float) -> Tensor:
    if activation is None:
        return h
    if activation == 'relu':
        return h.relu()
    if activation == 'leaky_relu':
        return h.leaky_relu(slope)
    raise InvalidConfig(f"Unknown activation {activation!r}")


def _check_inner(h: Tensor, w: Tensor, label: str):
    if h.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"{label}: input width {h.shape[-1]} does not match weight rows {w.shape[0]}")


def _check_rows(operator, h: Tensor, label: str):
    if operator.shape[1] != h.shape[0]:
        raise ShapeMismatch(f"{label}: operator has {operator.shape[1]} columns, input has {h.shape[0]} rows")


def gcn_forward(a_hat, h, w, activation: Optional[str] = 'relu', slope: float = 0.01) -> Tensor:
    """sigma(A_hat H W)"""
    h, w = Tensor._lift(h), Tensor._lift(w)
    _check_rows(a_hat, h, 'gcn')
    _check_inner(h, w, 'gcn')
    return _activate(sparse_matmul(a_hat, h @ w), activation, slope)


def gin_forward(adjacency, h, eps, mlp_params, activation: Optional[str] = 'relu',
                slope: float = 0.01) -> Tensor:
    """sigma(MLP((1 + eps) h_i + sum of neighbour h_j)) with a two-layer relu MLP"""
    h, eps = Tensor._lift(h), Tensor._lift(eps)
    w1, b1, w2, b2 = (Tensor._lift(p) for p in mlp_params)
    _check_rows(adjacency, h, 'gin')
    _check_inner(h, w1, 'gin')
    z = h * (eps + 1.0) + sparse_matmul(adjacency, h)
    hidden = (z @ w1 + b1).relu()
    return _activate(hidden @ w2 + b2, activation, slope)


def sage_forward(mean_aggregator, h, w, activation: Optional[str] = 'relu', slope: float = 0.01) -> Tensor:
    """sigma(concat(h_i, mean of neighbour h_j) W); isolated nodes aggregate zeros"""
    h, w = Tensor._lift(h), Tensor._lift(w)
    _check_rows(mean_aggregator, h, 'graphsage')
    if w.shape[0] != 2 * h.shape[1]:
        raise ShapeMismatch(f"graphsage: weight rows {w.shape[0]} != 2 x input width {h.shape[1]}")
    combined = concat([h, sparse_matmul(mean_aggregator, h)], axis=1)
    return _activate(combined @ w, activation, slope)


def gatv2_forward(ops: GraphOperators, h, w_src, w_dst, att, heads: int = 1, slope: float = 0.2,
                  concat_heads: bool = True, activation: Optional[str] = 'relu',
                  return_attention: bool = False):
    """GATv2 attention over N(i) plus the self-loop.

    Per head: e_ij = att . LeakyReLU(W_dst h_i + W_src h_j), softmax over j,
    message alpha_ij W_src h_j. Heads are concatenated or averaged.
    """
    h, w_src, w_dst, att = (Tensor._lift(t) for t in (h, w_src, w_dst, att))
    if h.shape[0] != ops.n_nodes:
        raise ShapeMismatch(f"gatv2: input has {h.shape[0]} rows, graph has {ops.n_nodes} nodes")
    _check_inner(h, w_src, 'gatv2')
    _check_inner(h, w_dst, 'gatv2')
    width = w_src.shape[1] // heads
    if width * heads != w_src.shape[1] or att.shape != (heads, width):
        raise ShapeMismatch(f"gatv2: weights {w_src.shape} / attention {att.shape} inconsistent with {heads} heads")
    n_edges = ops.edge_src.size

    source = (h @ w_src).take_rows(ops.edge_src)
    target = (h @ w_dst).take_rows(ops.edge_dst)
    mixed = (source + target).leaky_relu(slope)
    scores = (mixed * att.reshape(1, heads * width)).reshape(n_edges, heads, width).sum(axis=2)
    alpha = segment_softmax(scores, ops.segment_starts)
    messages = (source.reshape(n_edges, heads, width) * alpha.reshape(n_edges, heads, 1))
    out = scatter_rows_sum(messages.reshape(n_edges, heads * width), ops.edge_dst, ops.n_nodes)
    if not concat_heads:
        out = out.reshape(ops.n_nodes, heads, width).mean(axis=1)
    out = _activate(out, activation, slope)
    if return_attention:
        return out, alpha.data
    return out


# === PARAMETERS ===

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_parameters(spec: ModelSpec, in_dim: int, seed: int) -> Dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, named per layer"""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    width_in = in_dim
    widths = spec.layer_widths()
    for layer, width in enumerate(widths):
        prefix = f"layer{layer}"
        last = layer == len(widths) - 1
        if spec.architecture == 'gcn':
            params[f"{prefix}.weight"] = _glorot(rng, width_in, width)
        elif spec.architecture == 'graphsage':
            params[f"{prefix}.weight"] = _glorot(rng, 2 * width_in, width)
        elif spec.architecture == 'gin':
            params[f"{prefix}.eps"] = np.array([spec.gin_epsilon_init], dtype=np.float64)
            params[f"{prefix}.mlp1.weight"] = _glorot(rng, width_in, width)
            params[f"{prefix}.mlp1.bias"] = np.zeros(width)
            params[f"{prefix}.mlp2.weight"] = _glorot(rng, width, width)
            params[f"{prefix}.mlp2.bias"] = np.zeros(width)
        else:
            heads = spec.gat_heads
            params[f"{prefix}.w_src"] = _glorot(rng, width_in, heads * width)
            params[f"{prefix}.w_dst"] = _glorot(rng, width_in, heads * width)
            params[f"{prefix}.att"] = _glorot(rng, width, 1, shape=(heads, width))
            if not last:
                width = heads * width
        width_in = width
    params['head.weight'] = _glorot(rng, width_in, 1)
    params['head.bias'] = np.zeros(1)
    return params


# === FORWARD / LOSS ===

def forward_pass(spec: ModelSpec, params: Dict[str, Tensor], ops: GraphOperators, x,
                 training: bool = False, rng: Optional[np.random.Generator] = None) -> ForwardResult:
    x = Tensor._lift(x)
    if x.shape[0] != ops.n_nodes:
        raise ShapeMismatch(f"Feature matrix has {x.shape[0]} rows, graph has {ops.n_nodes} nodes")
    h = x
    slope = spec.leaky_slope
    depth = spec.depth
    for layer in range(depth):
        prefix = f"layer{layer}"
        last = layer == depth - 1
        if spec.architecture == 'gcn':
            h = gcn_forward(ops.normalized, h, params[f"{prefix}.weight"], spec.activation, slope)
        elif spec.architecture == 'graphsage':
            h = sage_forward(ops.mean_aggregator, h, params[f"{prefix}.weight"], spec.activation, slope)
        elif spec.architecture == 'gin':
            mlp = [params[f"{prefix}.{name}"] for name in ('mlp1.weight', 'mlp1.bias', 'mlp2.weight', 'mlp2.bias')]
            h = gin_forward(ops.adjacency, h, params[f"{prefix}.eps"], mlp, spec.activation, slope)
        else:
            h = gatv2_forward(ops, h, params[f"{prefix}.w_src"], params[f"{prefix}.w_dst"],
                              params[f"{prefix}.att"], heads=spec.gat_heads, slope=slope,
                              concat_heads=not last, activation=spec.activation)
        if training and not last:
            h = dropout(h, spec.dropout, rng)
    predictions = (h @ params['head.weight'] + params['head.bias']).reshape(ops.n_nodes)
    return ForwardResult(predictions=predictions, embeddings=h)


def mse_loss(y_hat, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared residual over masked nodes"""
    y_hat = Tensor._lift(y_hat)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (y_hat.shape[0] == y.shape[0] == mask.shape[0]):
        raise ShapeMismatch(f"Length mismatch: predictions {y_hat.shape[0]}, targets {y.shape[0]}, mask {mask.shape[0]}")
    index = np.flatnonzero(mask)
    if index.size == 0:
        raise EmptyMask("Loss mask selects no nodes")
    residual = y_hat.take_rows(index) - y[index]
    return (residual ** 2).mean()


def loss_and_gradients(spec: ModelSpec, parameters: Dict[str, np.ndarray], ops: GraphOperators, x,
                       y: np.ndarray, mask: np.ndarray, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Masked MSE and its exact gradient with respect to every parameter"""
    tensors = {name: Tensor(value, requires_grad=True, name=name) for name, value in parameters.items()}
    result = forward_pass(spec, tensors, ops, x, training=training, rng=rng)
    loss = mse_loss(result.predictions, y, mask)
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}
    return float(loss.data), grads


# === OPTIMIZERS ===

def optimizer_step(state: OptimizerState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   config: TrainConfig) -> Dict[str, np.ndarray]:
    """One update; weight decay is added to the gradient before the rule"""
    state.step += 1
    beta1, beta2 = ADAM_BETAS
    updated = {}
    for name, theta in params.items():
        g = grads[name] + config.weight_decay * theta
        if state.name == 'sgd':
            updated[name] = theta - config.lr * g
        elif state.name == 'rmsprop':
            v = RMSPROP_DECAY * state.second.get(name, np.zeros_like(theta)) + (1 - RMSPROP_DECAY) * g * g
            state.second[name] = v
            updated[name] = theta - config.lr * g / (np.sqrt(v) + OPTIMIZER_EPS)
        elif state.name == 'adam':
            m = beta1 * state.first.get(name, np.zeros_like(theta)) + (1 - beta1) * g
            v = beta2 * state.second.get(name, np.zeros_like(theta)) + (1 - beta2) * g * g
            state.first[name], state.second[name] = m, v
            m_hat = m / (1 - beta1 ** state.step)
            v_hat = v / (1 - beta2 ** state.step)
            updated[name] = theta - config.lr * m_hat / (np.sqrt(v_hat) + OPTIMIZER_EPS)
        else:
            raise InvalidConfig(f"Unknown optimizer {state.name!r}")
    return updated


class EarlyStopping:
    """Tracks the best monitored loss and stops after `patience` epochs without improvement"""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.best_parameters: Optional[Dict[str, np.ndarray]] = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float, parameters: Dict[str, np.ndarray]) -> bool:
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_parameters = {k: v.copy() for k, v in parameters.items()}
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# === TRAINING ===

def _eval_loss(spec, parameters, ops, x, y, mask) -> float:
    tensors = {name: Tensor(value) for name, value in parameters.items()}
    predictions = forward_pass(spec, tensors, ops, x).predictions
    return float(mse_loss(predictions, y, mask).data)


def train(spec: ModelSpec, graph: RegionGraph, x: np.ndarray, y: np.ndarray, train_mask: np.ndarray,
          val_mask: Optional[np.ndarray], config: TrainConfig) -> TrainedModel:
    """Full-graph training with masked MSE and early stopping on the validation mask"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    train_mask = np.asarray(train_mask, dtype=bool)
    val_mask = np.zeros_like(train_mask) if val_mask is None else np.asarray(val_mask, dtype=bool)
    n = graph.n_nodes
    if x.shape[0] != n or y.shape[0] != n or train_mask.shape[0] != n or val_mask.shape[0] != n:
        raise ShapeMismatch(f"Inputs must have {n} rows (features {x.shape[0]}, targets {y.shape[0]})")
    if not train_mask.any():
        raise EmptyTrainMask("Training mask selects no nodes")
    if (train_mask & val_mask).any():
        raise InvalidConfig("Training and validation masks overlap")
    if not np.isfinite(y[train_mask | val_mask]).all():
        raise LeakageDetected("A loss mask selects nodes whose labels are withheld")

    ops = graph_operators(graph)
    rng = np.random.default_rng(config.seed)
    parameters = init_parameters(spec, x.shape[1], config.seed)
    state = OptimizerState(name=config.optimizer)
    stopper = EarlyStopping(config.patience)
    monitor_val = bool(val_mask.any())
    log = []

    logger.info(f"=== TRAINING {spec.architecture} depth={spec.depth} on {int(train_mask.sum())} nodes "
                f"(val {int(val_mask.sum())}), {config.optimizer} lr={config.lr} ===")
    for epoch in range(1, config.epochs + 1):
        train_loss, grads = loss_and_gradients(spec, parameters, ops, x, y, train_mask,
                                               training=True, rng=rng)
        if not math.isfinite(train_loss):
            raise NonConvergence(f"Training loss became non-finite at epoch {epoch}")
        parameters = optimizer_step(state, parameters, grads, config)
        val_loss = _eval_loss(spec, parameters, ops, x, y, val_mask) if monitor_val else math.nan
        log.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss})
        if epoch % 50 == 0:
            logger.debug(f"Epoch {epoch}: train {train_loss:.6g}, val {val_loss:.6g}")
        if stopper.update(epoch, val_loss if monitor_val else train_loss, parameters):
            logger.info(f"Early stopping at epoch {epoch} (best epoch {stopper.best_epoch})")
            break

    if stopper.best_parameters is not None:
        parameters = stopper.best_parameters
    logger.info(f"Training finished after {len(log)} epochs; best epoch {stopper.best_epoch}, "
                f"best monitored loss {stopper.best_loss:.6g}")
    return TrainedModel(spec=spec, parameters=parameters, in_dim=x.shape[1], seed=config.seed,
                        train_config=config, training_log=log, best_epoch=stopper.best_epoch)


def forward(model: TrainedModel, graph: RegionGraph, x: np.ndarray, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> ForwardResult:
    if not model.parameters:
        raise UntrainedModel("Model has no parameters")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeMismatch(f"Model expects {model.in_dim} feature columns, got shape {x.shape}")
    if training and rng is None:
        rng = np.random.default_rng(model.seed)
    tensors = {name: Tensor(value) for name, value in model.parameters.items()}
    return forward_pass(model.spec, tensors, model.operators_for(graph), x, training=training, rng=rng)


def predict(model: TrainedModel, graph: RegionGraph, x: np.ndarray) -> np.ndarray:
    return forward(model, graph, x).predictions.data.copy()


# === CHECKPOINTS ===

def save_checkpoint(model: TrainedModel, path) -> Path:
    payload = {
        'spec': asdict(model.spec),
        'train_config': None if model.train_config is None else asdict(model.train_config),
        'in_dim': model.in_dim,
        'seed': model.seed,
        'best_epoch': model.best_epoch,
        'parameters': {name: {'shape': list(value.shape), 'values': value.ravel().tolist()}
                       for name, value in model.parameters.items()},
        'training_log': model.training_log,
    }
    path = artifacts.write_json(payload, path)
    logger.info(f"Checkpoint saved: {path}")
    return path


def load_checkpoint(path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise InputFileNotFound(path)
    payload = artifacts.read_json(path)
    parameters = {name: np.array(entry['values'], dtype=np.float64).reshape(entry['shape'])
                  for name, entry in payload['parameters'].items()}
    log = [{'epoch': row['epoch'], 'train_loss': row['train_loss'],
            'val_loss': math.nan if row['val_loss'] is None else row['val_loss']}
           for row in payload.get('training_log', [])]
    train_config = payload.get('train_config')
    return TrainedModel(
        spec=ModelSpec(**payload['spec']),
        parameters=parameters,
        in_dim=int(payload['in_dim']),
        seed=int(payload['seed']),
        train_config=None if train_config is None else TrainConfig(**train_config),
        training_log=log,
        best_epoch=payload.get('best_epoch'),
    )


def write_training_log(model: TrainedModel, path) -> Path:
    return artifacts.write_csv(model.log_frame(), path)
