"""Toy set-prediction decoder trained with Hungarian matching plus MMCL.

The decoder keeps only what the contrastive losses interact with: learnable
content queries refined layer by layer against a set of object tokens, shared
class/box heads after every layer, and per-layer Hungarian-matched losses.

Layer ``l`` maps ``Q^l`` to ``Q^{l+1}``::

    Q^{l+1} = Q^l + Q^l S_l + b_l + softmax(Q^l (X P_l)^T / sqrt(D)) X V_l

where the rows of ``X`` are object tokens ``[feature, box]``. Predictions of
layer ``l`` are the heads applied to ``Q^{l+1}``; the contrastive loss of a
target layer ``l`` acts on its input ``Q^l``, so ``T = {0}`` shapes the
learnable queries directly.

All gradients are hand-derived (see ``backward``).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, InvalidInputError, NonFiniteLossError
from .losses import LossConfig, compute_loss
from .matcher import solve_assignment
from .metrics import (align_groups, group_class_consistency, homogeneity_coefficient,
                      interclass_similarity)
from .optim import make_optimizer
from .partition import partition_queries
from .seeding import stream_rng

BOX_DIM = 4
FOURIER_FREQS = (1, 2)
TOKEN_EXTRA = BOX_DIM + 4 * len(FOURIER_FREQS)


def box_embedding(boxes):
    """``[box, sin/cos(pi f cx), sin/cos(pi f cy)]``; lets linear attention scores pick out regions."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, BOX_DIM)
    parts = [boxes]
    for f in FOURIER_FREQS:
        ang = np.pi * f * boxes[:, :2]
        parts += [np.sin(ang), np.cos(ang)]
    return np.hstack(parts)


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Scene:
    """Ground-truth objects of one synthetic image.

    ``boxes`` rows are (cx, cy, w, h) inside the unit square. ``overlap_graph``
    lists the pairs that were forced to intersect and whose features blend.
    """

    classes: np.ndarray
    boxes: np.ndarray
    features: np.ndarray
    overlap_graph: tuple = ()

    @property
    def n_objects(self):
        return int(self.classes.shape[0])

    def tokens(self):
        """Decoder memory: one ``[feature, box embedding]`` row per object."""
        return np.hstack([self.features, box_embedding(self.boxes)])


@dataclass(frozen=True)
class SceneParams:
    classes: int = 5
    max_objects: int = 4
    overlap_prob: float = 0.5
    noise: float = 0.1
    dim: int = 16

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError("scenes need at least 2 classes")
        if self.max_objects < 1:
            raise ConfigurationError("max_objects must be >= 1")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ConfigurationError("overlap_prob must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")


def make_prototypes(n_classes, dim, rng):
    """Unit class prototypes; exactly orthonormal when ``n_classes <= dim``."""
    g = rng.normal(size=(dim, n_classes))
    if n_classes <= dim:
        q, r = np.linalg.qr(g)
        return (q * np.sign(np.diag(r))).T
    return (g / np.linalg.norm(g, axis=0)).T


def _place_near(anchor, w, h, rng):
    """A center for a (w, h) box that intersects ``anchor``, kept inside the unit square."""
    ax, ay, aw, ah = anchor
    cx = ax + rng.uniform(-0.5, 0.5) * (aw + w)
    cy = ay + rng.uniform(-0.5, 0.5) * (ah + h)
    # clipping moves the box toward the interior, which never breaks the overlap
    return np.clip(cx, w / 2, 1 - w / 2), np.clip(cy, h / 2, 1 - h / 2)


def generate_scene(n_classes, max_objects, overlap_prob, noise, seed, dim=16,
                   prototypes=None):
    """Sample 1..max_objects objects with uniform classes and boxes.

    Each new object is, with probability ``overlap_prob``, forced onto a random
    earlier object; every object with overlap partners gets
    ``(1 - lam) * proto + lam * mean(partner protos)`` with ``lam ~ U[0.2, 0.5]``,
    then Gaussian noise of scale ``noise``.
    """
    SceneParams(n_classes, max_objects, overlap_prob, noise, dim)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if prototypes is None:
        prototypes = make_prototypes(n_classes, dim, rng)
    m = int(rng.integers(1, max_objects + 1))
    classes = rng.integers(0, n_classes, size=m)
    boxes = np.empty((m, BOX_DIM))
    edges = []
    for j in range(m):
        w, h = rng.uniform(0.05, 0.3, size=2)
        if j > 0 and rng.uniform() < overlap_prob:
            i = int(rng.integers(0, j))
            cx, cy = _place_near(boxes[i], w, h, rng)
            edges.append((i, j))
        else:
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        boxes[j] = (cx, cy, w, h)

    protos = prototypes[classes]
    features = protos.copy()
    neighbors = [[] for _ in range(m)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    for i in range(m):
        if neighbors[i]:
            lam = rng.uniform(0.2, 0.5)
            features[i] = (1 - lam) * protos[i] + lam * protos[neighbors[i]].mean(axis=0)
    if noise > 0:
        features = features + noise * rng.normal(size=features.shape)
    return Scene(classes=classes, boxes=boxes, features=features, overlap_graph=tuple(edges))


def boxes_intersect(a, b):
    return (abs(a[0] - b[0]) < (a[2] + b[2]) / 2) and (abs(a[1] - b[1]) < (a[3] + b[3]) / 2)


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------- model

@dataclass
class SurrogateModel:
    """Parameters live in ``params``; per-layer entries are suffixed by layer index."""

    n_queries: int
    dim: int
    n_classes: int
    n_layers: int
    params: dict

    @property
    def queries(self):
        return self.params["queries"]

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def init_model(n_queries, dim, n_classes, n_layers, rng, scale=0.1):
    if min(n_queries, dim, n_classes, n_layers) < 1:
        raise ConfigurationError("model dimensions must all be >= 1")
    tok = dim + TOKEN_EXTRA
    params = {"queries": rng.normal(size=(n_queries, dim))}
    for l in range(n_layers):
        params[f"mix{l}"] = scale * rng.normal(size=(dim, dim)) / np.sqrt(dim)
        params[f"bias{l}"] = np.zeros(dim)
        params[f"proj{l}"] = rng.normal(size=(tok, dim)) / np.sqrt(tok)
        params[f"value{l}"] = rng.normal(size=(tok, dim)) / np.sqrt(tok)
    params["cls_w"] = rng.normal(size=(dim, n_classes + 1)) / np.sqrt(dim)
    params["cls_b"] = np.zeros(n_classes + 1)
    params["box_w"] = scale * rng.normal(size=(dim, BOX_DIM)) / np.sqrt(dim)
    params["box_b"] = np.zeros(BOX_DIM)
    return SurrogateModel(n_queries, dim, n_classes, n_layers, params)


def zero_model(n_queries, dim, n_classes, n_layers, queries=None):
    m = init_model(n_queries, dim, n_classes, n_layers, np.random.default_rng(0))
    for v in m.params.values():
        v[...] = 0.0
    if queries is not None:
        m.params["queries"][...] = queries
    return m


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardPass:
    states: list  # Q^0 .. Q^L
    logits: list  # layer l predictions, from Q^{l+1}
    boxes: list
    attention: list
    keys: list
    values: list
    tokens: np.ndarray


def forward(model, scene):
    """Run all decoder layers on one scene."""
    prm = model.params
    x = scene.tokens()
    if x.shape[0] and x.shape[1] != model.dim + TOKEN_EXTRA:
        raise ConfigurationError(
            f"scene feature dim {x.shape[1] - TOKEN_EXTRA} != model dim {model.dim}")
    q = prm["queries"]
    states, logits, boxes, attn, keys, vals = [q], [], [], [], [], []
    scale = 1.0 / np.sqrt(model.dim)
    for l in range(model.n_layers):
        nxt = q + q @ prm[f"mix{l}"] + prm[f"bias{l}"]
        if x.shape[0]:
            k = x @ prm[f"proj{l}"]
            v = x @ prm[f"value{l}"]
            a = _softmax_rows((q @ k.T) * scale)
            nxt = nxt + a @ v
        else:
            k = v = a = None
        keys.append(k)
        vals.append(v)
        attn.append(a)
        q = nxt
        states.append(q)
        logits.append(q @ prm["cls_w"] + prm["cls_b"])
        boxes.append(_sigmoid(q @ prm["box_w"] + prm["box_b"]))
    return ForwardPass(states, logits, boxes, attn, keys, vals, x)


# ---------------------------------------------------------------- losses

def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def match_cost(logits, boxes, scene, box_weight=1.0):
    """Matching cost: class cross-entropy plus weighted L1 box distance, shape (N, M)."""
    logp = _log_softmax(logits)
    ce = -logp[:, scene.classes]
    l1 = np.abs(boxes[:, None, :] - scene.boxes[None, :, :]).sum(axis=2)
    return ce + box_weight * l1


@dataclass
class BaseLoss:
    value: float
    grad_logits: np.ndarray
    grad_boxes: np.ndarray
    pairs: tuple  # Hungarian (query, object) pairs


def base_loss(logits, boxes, scene, no_object_weight=1.0, box_weight=1.0):
    """Hungarian-matched set loss for one layer's predictions.

    Mean matched cost (cross-entropy + ``box_weight`` * box L1) plus ``no_object_weight`` times
    the mean no-object cross-entropy of unmatched queries. The last logit is
    the no-object class.
    """
    n, n_cls = logits.shape
    logp = _log_softmax(logits)
    prob = np.exp(logp)
    g_logits = np.zeros_like(logits)
    g_boxes = np.zeros_like(boxes)
    value = 0.0
    pairs = ()
    matched = np.zeros(n, dtype=bool)
    if scene.n_objects:
        assignment = solve_assignment(match_cost(logits, boxes, scene, box_weight))
        pairs = assignment.pairs
        qi = np.array([a for a, _ in pairs])
        oi = np.array([b for _, b in pairs])
        cls = scene.classes[oi]
        cnt = len(pairs)
        diff = boxes[qi] - scene.boxes[oi]
        value += (np.sum(-logp[qi, cls]) + box_weight * np.sum(np.abs(diff))) / cnt
        onehot = np.zeros((cnt, n_cls))
        onehot[np.arange(cnt), cls] = 1.0
        g_logits[qi] += (prob[qi] - onehot) / cnt
        g_boxes[qi] += box_weight * np.sign(diff) / cnt
        matched[qi] = True
    bg = ~matched
    n_bg = int(bg.sum())
    if n_bg and no_object_weight:
        c = no_object_weight / n_bg
        value += c * np.sum(-logp[bg, -1])
        onehot = np.zeros(n_cls)
        onehot[-1] = 1.0
        g_logits[bg] += c * (prob[bg] - onehot)
    return BaseLoss(float(value), g_logits, g_boxes, pairs)


# ---------------------------------------------------------------- backward

def backward(model, fp, grad_states, grad_logits, grad_boxes):
    """Gradients of all parameters.

    ``grad_states[l]`` is an extra dL/dQ^l (contrastive terms), ``grad_logits[l]``
    and ``grad_boxes[l]`` the gradients w.r.t. layer ``l``'s predictions.
    Missing entries may be ``None``.
    """
    prm = model.params
    grads = {k: np.zeros_like(v) for k, v in prm.items()}
    scale = 1.0 / np.sqrt(model.dim)
    x = fp.tokens
    g_next = np.zeros_like(fp.states[-1])
    for l in reversed(range(model.n_layers)):
        q_out = fp.states[l + 1]
        # heads on Q^{l+1}
        if grad_logits[l] is not None:
            grads["cls_w"] += q_out.T @ grad_logits[l]
            grads["cls_b"] += grad_logits[l].sum(axis=0)
            g_next = g_next + grad_logits[l] @ prm["cls_w"].T
        if grad_boxes[l] is not None:
            r = fp.boxes[l]
            gz = grad_boxes[l] * r * (1.0 - r)
            grads["box_w"] += q_out.T @ gz
            grads["box_b"] += gz.sum(axis=0)
            g_next = g_next + gz @ prm["box_w"].T
        if grad_states[l + 1] is not None:
            g_next = g_next + grad_states[l + 1]
        # layer l: Q^{l+1} = Q^l + Q^l S + b + A V
        q_in = fp.states[l]
        g = g_next
        grads[f"mix{l}"] += q_in.T @ g
        grads[f"bias{l}"] += g.sum(axis=0)
        g_in = g + g @ prm[f"mix{l}"].T
        a = fp.attention[l]
        if a is not None:
            k, v = fp.keys[l], fp.values[l]
            gv = a.T @ g
            ga = g @ v.T
            gz = a * (ga - np.sum(ga * a, axis=1, keepdims=True)) * scale
            g_in = g_in + gz @ k
            gk = gz.T @ q_in
            grads[f"proj{l}"] += x.T @ gk
            grads[f"value{l}"] += x.T @ gv
        g_next = g_in
    if grad_states[0] is not None:
        g_next = g_next + grad_states[0]
    grads["queries"] += g_next
    return grads


# ---------------------------------------------------------------- training

LR_SCHEDULES = ("constant", "cosine")


def epoch_lr(base, schedule, epoch, epochs):
    """Learning rate for ``epoch``; ``cosine`` anneals from ``base`` toward 0."""
    if schedule == "constant":
        return base
    return base * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))


@dataclass(frozen=True)
class TrainConfig:
    """Training run settings. ``target_layers`` empty means no contrastive term."""

    n_queries: int = 30
    n_layers: int = 3
    target_layers: tuple = (0,)
    epochs: int = 50
    learning_rate: float = 1e-2
    lr_schedule: str = "cosine"
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    contrastive_loss: str = "mmcl"
    seed: int = 0
    scenes_per_epoch: int = 200
    eval_scenes: int = 100
    optimizer: str = "adam"
    no_object_weight: float = 1.0
    box_weight: float = 5.0
    contrastive_through_layers: bool = True
    init_scale: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.n_layers < 1 or self.n_queries < 1:
            raise ConfigurationError("n_layers and n_queries must be >= 1")
        bad = [t for t in self.target_layers if not 0 <= t < self.n_layers]
        if bad:
            raise ConfigurationError(
                f"target layers {bad} outside 0..{self.n_layers - 1}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(
                f"unknown lr_schedule {self.lr_schedule!r}; choose from {', '.join(LR_SCHEDULES)}")
        if self.box_weight < 0 or self.no_object_weight < 0:
            raise ConfigurationError("box_weight and no_object_weight must be >= 0")
        if self.scenes_per_epoch < 1 or self.eval_scenes < 1:
            raise ConfigurationError("scenes_per_epoch and eval_scenes must be >= 1")
        if self.contrastive_loss not in ("mmcl", "ime", "imc", "npair", "oca", "iic",
                                         "infonce"):
            raise ConfigurationError(f"unknown contrastive loss {self.contrastive_loss!r}")


@dataclass(frozen=True)
class StepRecord:
    base_loss: float
    contrastive_loss: float
    layer_base_losses: tuple


def _check_finite(value, term):
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite {term}: {value}", term=term)


def loss_and_grads(model, scene, p, tc):
    """Total loss of one scene and the gradient of every parameter."""
    fp = forward(model, scene)
    L = model.n_layers
    grad_states = [None] * (L + 1)
    g_logits, g_boxes, layer_vals = [], [], []
    for l in range(L):
        if not (np.all(np.isfinite(fp.logits[l])) and np.all(np.isfinite(fp.boxes[l]))):
            raise NonFiniteLossError(f"non-finite predictions feeding base loss (layer {l})",
                                     term=f"base loss (layer {l})")
        bl = base_loss(fp.logits[l], fp.boxes[l], scene, tc.no_object_weight, tc.box_weight)
        _check_finite(bl.value, f"base loss (layer {l})")
        layer_vals.append(bl.value)
        g_logits.append(bl.grad_logits)
        g_boxes.append(bl.grad_boxes)
    contrastive = 0.0
    direct_query_grad = None
    for l in sorted(set(tc.target_layers)):
        res = compute_loss(tc.contrastive_loss, fp.states[l], p, tc.loss_cfg)
        _check_finite(res.value, f"contrastive loss (layer {l})")
        contrastive += res.value
        if tc.contrastive_through_layers or l == 0:
            grad_states[l] = res.gradient if grad_states[l] is None else grad_states[l] + res.gradient
        else:
            # straight-through: route dL/dQ^l to the learnable queries only
            direct_query_grad = (res.gradient if direct_query_grad is None
                                 else direct_query_grad + res.gradient)
    grads = backward(model, fp, grad_states, g_logits, g_boxes)
    if direct_query_grad is not None:
        grads["queries"] += direct_query_grad
    record = StepRecord(float(sum(layer_vals)), float(contrastive), tuple(layer_vals))
    return record, grads


def train_step(model, scene, p, tc, optimizer=None):
    """One update on one scene. Mutates and returns ``model``."""
    p.check_rows(model.n_queries)
    if optimizer is None:
        optimizer = make_optimizer(tc.optimizer, tc.learning_rate)
    record, grads = loss_and_grads(model, scene, p, tc)
    optimizer.step(model.params, grads)
    return model, record


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    base_loss: float
    contrastive_loss: float
    homogeneity: float
    interclass_similarity: float
    group_class_consistency: float
    fixed_group_class_consistency: float
    detection_accuracy: float


TRACE_COLUMNS = ("epoch", "base_loss", "contrastive_loss", "homogeneity",
                 "interclass_similarity", "group_class_consistency",
                 "fixed_group_class_consistency", "detection_accuracy")


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def rows(self):
        return [tuple(getattr(r, c) for c in TRACE_COLUMNS) for r in self.records]


def evaluate(model, scenes, p, iou_threshold=0.5, box_weight=1.0):
    """Final-layer matching on held-out scenes.

    Returns ``(matches, detection_accuracy)``; ``matches`` holds
    ``(query, object class)`` for every Hungarian pair. An object counts as
    detected when its matched query predicts its class (argmax over all
    logits, no-object included) with box IoU >= ``iou_threshold``.
    """
    matches = []
    hits = total = 0
    for scene in scenes:
        fp = forward(model, scene)
        logits, boxes = fp.logits[-1], fp.boxes[-1]
        pairs = solve_assignment(match_cost(logits, boxes, scene, box_weight)).pairs
        pred = np.argmax(logits, axis=1)
        for qi, oi in pairs:
            cls = int(scene.classes[oi])
            matches.append((qi, cls))
            total += 1
            if pred[qi] == cls and box_iou(boxes[qi], scene.boxes[oi]) >= iou_threshold:
                hits += 1
    return matches, (hits / total if total else 0.0)


def _scene_stream(rng, n, sp, prototypes):
    return [generate_scene(sp.classes, sp.max_objects, sp.overlap_prob, sp.noise,
                           int(rng.integers(0, 2**63)), sp.dim, prototypes)
            for _ in range(n)]


def run_training(tc, sp=SceneParams()):
    """Train from scratch and record one :class:`EpochRecord` per epoch.

    Scenes, prototypes and the initial model come from separate seed streams
    of ``tc.seed``, so runs differing only in loss settings see identical data
    and start from identical weights.
    """
    p = partition_queries(tc.n_queries, sp.classes)
    prototypes = make_prototypes(sp.classes, sp.dim, stream_rng(tc.seed, "prototypes"))
    model = init_model(tc.n_queries, sp.dim, sp.classes, tc.n_layers,
                       stream_rng(tc.seed, "model"), tc.init_scale)
    eval_set = _scene_stream(stream_rng(tc.seed, "eval_scenes"), tc.eval_scenes, sp,
                             prototypes)
    train_rng = stream_rng(tc.seed, "train_scenes")
    opt = make_optimizer(tc.optimizer, tc.learning_rate)
    trace = TrainTrace()
    for epoch in range(tc.epochs):
        opt.lr = epoch_lr(tc.learning_rate, tc.lr_schedule, epoch, tc.epochs)
        base_sum = con_sum = 0.0
        for scene in _scene_stream(train_rng, tc.scenes_per_epoch, sp, prototypes):
            _, rec = train_step(model, scene, p, tc, opt)
            base_sum += rec.base_loss
            con_sum += rec.contrastive_loss
        matches, acc = evaluate(model, eval_set, p, box_weight=tc.box_weight)
        q = model.queries
        trace.records.append(EpochRecord(
            epoch=epoch,
            base_loss=base_sum / tc.scenes_per_epoch,
            contrastive_loss=con_sum / tc.scenes_per_epoch,
            homogeneity=homogeneity_coefficient(q, p),
            interclass_similarity=interclass_similarity(q, p),
            group_class_consistency=group_class_consistency(
                matches, p, align_groups(matches, p)),
            fixed_group_class_consistency=group_class_consistency(matches, p),
            detection_accuracy=acc,
        ))
    return trace, model
