"""Message-passing model that fine-tunes queueing-baseline delay features.

The model runs three rounds of typed message passing over a sample's
heterogeneous graph. Within every round the baseline features are written
back over the leading hidden columns of the path and link states, so the
learned part refines a physically grounded starting point instead of
replacing it. The delay head turns per-link occupancy estimates into
per-path delays by summing queue_size/capacity contributions along each
path, which makes the untrained model reproduce the baseline exactly when
the head is bypassed.

Two variants share the code path: "m1" uses path, link and node entities;
"m2" has no node entity at all, so node rows and the node feature column
of a bundle are dropped before the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .bundles import Bundle

VARIANTS = ("m1", "m2")

# b_link column count per variant; the last column is always the per-link
# delay factor L (see docs/FORMATS.md).
B_LINK_WIDTHS = {"m1": 1, "m2": 3}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description, embedded verbatim in every checkpoint.

    hidden widths are per-entity state sizes (node_hidden is 0 for m2).
    mlp1_hidden / mlp2_hidden list intermediate layer widths only; the
    input transform always ends in the total hidden width and the readout
    always ends in a single logit. attention_heads and cheb_order are
    recorded for forward compatibility; only 1 is implemented for either.
    """

    variant: str
    path_hidden: int
    link_hidden: int
    node_hidden: int
    mlp1_hidden: tuple[int, ...]
    mlp1_activate_output: bool
    mlp2_hidden: tuple[int, ...]
    num_rounds: int = 3
    attention_heads: int = 1
    cheb_order: int = 1
    attention_slope: float = 0.2

    @classmethod
    def for_variant(cls, variant: str) -> "ModelSpec":
        if variant == "m1":
            return cls(
                variant="m1",
                path_hidden=64,
                link_hidden=64,
                node_hidden=64,
                mlp1_hidden=(128,),
                mlp1_activate_output=True,
                mlp2_hidden=(512, 512),
            )
        if variant == "m2":
            return cls(
                variant="m2",
                path_hidden=8,
                link_hidden=8,
                node_hidden=0,
                mlp1_hidden=(),
                mlp1_activate_output=False,
                mlp2_hidden=(128, 32),
            )
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")

    @property
    def hidden_total(self) -> int:
        return self.path_hidden + self.link_hidden + self.node_hidden

    @property
    def hidden_widths(self) -> tuple[int, int, int]:
        return (self.path_hidden, self.link_hidden, self.node_hidden)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.path_hidden <= 0 or self.link_hidden <= 0:
            raise ValueError("path_hidden and link_hidden must be positive")
        if self.node_hidden < 0 or (self.variant == "m1" and self.node_hidden <= 0):
            raise ValueError("node_hidden must be positive for m1 and 0 for m2")
        if self.variant == "m2" and self.node_hidden != 0:
            raise ValueError("m2 has no node entity; node_hidden must be 0")
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.attention_heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.cheb_order != 1:
            raise ValueError("only Chebyshev order 1 is implemented")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp1_hidden"] = list(self.mlp1_hidden)
        out["mlp2_hidden"] = list(self.mlp2_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        data["mlp1_hidden"] = tuple(data["mlp1_hidden"])
        data["mlp2_hidden"] = tuple(data["mlp2_hidden"])
        return cls(**data)


@dataclass
class GraphTensors:
    """One bundle converted to torch tensors in model row layout.

    For m2 the node rows and the node fixed-feature column have already
    been removed; path and link rows keep the indices they had in the
    bundle because nodes always come last.
    """

    sample_id: str
    variant: str
    n_paths: int
    n_links: int
    n_nodes: int
    fixed: Tensor
    fixed_widths: tuple[int, ...]
    edges: dict[str, Tensor]
    elp_steps: list[Tensor]
    b_path: Tensor
    b_link: Tensor
    scale: Tensor
    lp_src: Tensor
    lp_dst: Tensor
    labels: Tensor
    path_ids: np.ndarray
    link_ids: np.ndarray


def prepare(
    bundle: Bundle,
    spec: ModelSpec,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> GraphTensors:
    """Turn a Bundle into the tensors one forward pass needs."""
    if bundle.variant != spec.variant:
        raise ValueError(
            f"bundle {bundle.sample_id} is variant {bundle.variant!r}, model expects {spec.variant!r}"
        )
    if tuple(bundle.hidden_widths) != spec.hidden_widths:
        raise ValueError(
            f"shape mismatch: bundle hidden widths {tuple(bundle.hidden_widths)} "
            f"!= model {spec.hidden_widths}"
        )
    if bundle.b_link.ndim != 2 or bundle.b_link.shape[1] != B_LINK_WIDTHS[spec.variant]:
        raise ValueError(
            f"missing baseline columns: b_link has shape {bundle.b_link.shape}, "
            f"variant {spec.variant} needs {B_LINK_WIDTHS[spec.variant]} columns"
        )

    n_paths, n_links = bundle.n_paths, bundle.n_links
    if spec.variant == "m1":
        n_nodes = bundle.n_nodes
        fixed = bundle.x_fixed
        fixed_widths = bundle.fixed_widths
        edge_kinds = (
            "node_to_path",
            "path_to_node",
            "link_to_node",
            "node_to_link",
            "path_to_link",
        )
    else:
        n_nodes = 0
        keep_cols = bundle.fixed_widths[0] + bundle.fixed_widths[1]
        fixed = bundle.x_fixed[: n_paths + n_links, :keep_cols]
        fixed_widths = bundle.fixed_widths[:2]
        edge_kinds = ("path_to_link",)

    def tens(arr, dt=dtype):
        return torch.as_tensor(np.ascontiguousarray(arr), dtype=dt, device=device)

    lp = bundle.edges["link_to_path"]
    capacity = bundle.link_capacity
    if np.any(capacity <= 0):
        raise ValueError(f"bundle {bundle.sample_id} has non-positive link capacity")
    return GraphTensors(
        sample_id=bundle.sample_id,
        variant=bundle.variant,
        n_paths=n_paths,
        n_links=n_links,
        n_nodes=n_nodes,
        fixed=tens(fixed),
        fixed_widths=tuple(fixed_widths),
        edges={k: tens(bundle.edges[k], torch.long) for k in edge_kinds},
        elp_steps=[tens(step, torch.long) for step in bundle.elp_steps],
        b_path=tens(bundle.b_path).reshape(-1, 1),
        b_link=tens(bundle.b_link),
        scale=tens(bundle.link_queue_size_bits / capacity),
        lp_src=tens(lp[:, 0], torch.long),
        lp_dst=tens(lp[:, 1], torch.long),
        labels=tens(bundle.labels),
        path_ids=np.asarray(bundle.path_ids),
        link_ids=np.asarray(bundle.link_ids),
    )


class AttentionConv(nn.Module):
    """Single-head attention message passing over one directed edge kind.

    Scores are LeakyReLU(a_src . Wx_src + a_dst . Wx_dst) with the slope
    given at construction, normalised by softmax over each target's
    incoming edges. Targets without incoming edges get an all-zero
    output; there are no self loops, no dropout and no bias.
    """

    def __init__(self, in_width: int, out_width: int, slope: float = 0.2):
        super().__init__()
        self.proj = nn.Linear(in_width, out_width, bias=False)
        self.att_src = nn.Parameter(torch.empty(out_width))
        self.att_dst = nn.Parameter(torch.empty(out_width))
        self.slope = slope
        self.out_width = out_width
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # gain < 1 keeps feature magnitudes from compounding across rounds;
        # with gain 1 the stacked attention blocks blow hidden states up a
        # hundredfold before the readout ever sees them
        nn.init.xavier_uniform_(self.proj.weight, gain=0.5)
        bound = 1.0 / math.sqrt(self.out_width)
        nn.init.uniform_(self.att_src, -bound, bound)
        nn.init.uniform_(self.att_dst, -bound, bound)

    def forward(self, x: Tensor, edges: Tensor, n_targets: int, target_offset: int) -> Tensor:
        out = x.new_zeros((n_targets, self.out_width))
        if edges.numel() == 0 or n_targets == 0:
            return out
        src = edges[:, 0]
        dst = edges[:, 1] - target_offset
        msg = self.proj(x[src])
        tgt = self.proj(x[edges[:, 1]])
        score = nn.functional.leaky_relu(
            (msg * self.att_src).sum(-1) + (tgt * self.att_dst).sum(-1), self.slope
        )
        # softmax per target; the max shift is a constant so it is detached
        shift = score.new_full((n_targets,), float("-inf"))
        shift = shift.scatter_reduce(0, dst, score.detach(), "amax", include_self=True)
        num = (score - shift[dst]).exp()
        den = score.new_zeros(n_targets).index_add(0, dst, num)
        alpha = num / den[dst]
        return out.index_add(0, dst, alpha.unsqueeze(-1) * msg)


class GatedRecurrentConv(nn.Module):
    """Shared gated recurrent cell walking link->path edges hop by hop.

    Each gate filters the input rows with an order-1 Chebyshev pair (one
    weight on the target row itself, one on the in-neighbour mean) and
    adds a linear map of the recurrent state. The state side is a plain
    Linear because the steps are bipartite: source rows are links, which
    carry no path state. One instance is shared by all rounds.
    """

    def __init__(self, in_width: int, state_width: int):
        super().__init__()

        def pair():
            return nn.Linear(in_width, state_width, bias=False)

        self.z_self, self.z_neigh = pair(), pair()
        self.r_self, self.r_neigh = pair(), pair()
        self.c_self, self.c_neigh = pair(), pair()
        self.z_state = nn.Linear(state_width, state_width)
        self.r_state = nn.Linear(state_width, state_width)
        self.c_state = nn.Linear(state_width, state_width)

    def _neighbour_mean(self, x: Tensor, edges: Tensor, n_targets: int) -> Tensor:
        agg = x.new_zeros((n_targets, x.shape[1]))
        if edges.numel() == 0:
            return agg
        src, dst = edges[:, 0], edges[:, 1]
        agg = agg.index_add(0, dst, x[src])
        deg = x.new_zeros(n_targets).index_add(0, dst, torch.ones_like(src, dtype=x.dtype))
        return agg / deg.clamp(min=1.0).unsqueeze(-1)

    def forward(self, x: Tensor, state: Tensor, edges: Tensor, n_targets: int) -> Tensor:
        x_t = x[:n_targets]
        neigh = self._neighbour_mean(x, edges, n_targets)
        z = torch.sigmoid(self.z_self(x_t) + self.z_neigh(neigh) + self.z_state(state))
        r = torch.sigmoid(self.r_self(x_t) + self.r_neigh(neigh) + self.r_state(state))
        cand = torch.tanh(self.c_self(x_t) + self.c_neigh(neigh) + self.c_state(r * state))
        return z * state + (1.0 - z) * cand


@dataclass
class RoundState:
    """Entity hidden blocks captured at the end of one round."""

    ph: Tensor
    lh: Tensor
    nh: Optional[Tensor]


def _mlp(widths: list[int], activate_output: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(widths, widths[1:]):
        layers.append(nn.Linear(a, b))
        layers.append(nn.LeakyReLU())
    if not activate_output:
        layers.pop()
    return nn.Sequential(*layers)


class DelayFineTuner(nn.Module):
    """Three-round message-passing refinement of baseline delay features.

    Per round: (m1) paths receive node messages through a round-specific
    attention convolution; paths receive link messages through the shared
    recurrent cell unrolled over the hop partition, the state divided by
    the step count; the first hidden path column is overwritten with
    b_path; (m1) nodes receive path messages then add link messages, and
    links receive node messages; links receive path messages (replacing
    the node result, which stays visible through the attention target
    term); the first hidden link columns are overwritten with b_link.
    The head maps each link's fixed feature plus hidden state through a
    sigmoid readout to an occupancy u in (0,1), and per-path delay is the
    sum of u * queue_size/capacity along the path's hops.
    """

    def __init__(self, spec: ModelSpec, fixed_widths: tuple[int, ...], b_link_width: int):
        super().__init__()
        spec.validate()
        expect_fixed = 3 if spec.variant == "m1" else 2
        if len(fixed_widths) != expect_fixed:
            raise ValueError(
                f"variant {spec.variant} expects {expect_fixed} fixed blocks, got {fixed_widths}"
            )
        if b_link_width != B_LINK_WIDTHS[spec.variant]:
            raise ValueError(
                f"variant {spec.variant} expects b_link width {B_LINK_WIDTHS[spec.variant]}, "
                f"got {b_link_width}"
            )
        self.spec = spec
        self.fixed_widths = tuple(int(w) for w in fixed_widths)
        self.b_link_width = int(b_link_width)
        in_width = sum(self.fixed_widths) + spec.hidden_total
        self.in_width = in_width

        self.input_transform = _mlp(
            [in_width, *spec.mlp1_hidden, spec.hidden_total], spec.mlp1_activate_output
        )
        self.recurrent = GatedRecurrentConv(in_width, spec.path_hidden)
        rounds = []
        for _ in range(spec.num_rounds):
            convs = {"path_to_link": AttentionConv(in_width, spec.link_hidden, spec.attention_slope)}
            if spec.variant == "m1":
                convs.update(
                    node_to_path=AttentionConv(in_width, spec.path_hidden, spec.attention_slope),
                    path_to_node=AttentionConv(in_width, spec.node_hidden, spec.attention_slope),
                    link_to_node=AttentionConv(in_width, spec.node_hidden, spec.attention_slope),
                    node_to_link=AttentionConv(in_width, spec.link_hidden, spec.attention_slope),
                )
            rounds.append(nn.ModuleDict(convs))
        self.round_convs = nn.ModuleList(rounds)
        self.readout = _mlp(
            [self.fixed_widths[1] + spec.link_hidden, *spec.mlp2_hidden, 1],
            activate_output=False,
        )
        # zero head: the first forward predicts occupancy 0.5 on every link
        # no matter how the message-passing features land, so training never
        # starts inside a saturated sigmoid
        last = self.readout[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        self.act = nn.LeakyReLU()

    def _assemble(self, g: GraphTensors, ph: Tensor, lh: Tensor, nh: Optional[Tensor]) -> Tensor:
        s = self.spec
        blocks = [
            torch.cat([ph, ph.new_zeros((g.n_paths, s.link_hidden + s.node_hidden))], dim=1),
            torch.cat(
                [
                    lh.new_zeros((g.n_links, s.path_hidden)),
                    lh,
                    lh.new_zeros((g.n_links, s.node_hidden)),
                ],
                dim=1,
            ),
        ]
        if nh is not None:
            blocks.append(
                torch.cat([nh.new_zeros((g.n_nodes, s.path_hidden + s.link_hidden)), nh], dim=1)
            )
        return torch.cat([g.fixed, torch.cat(blocks, dim=0)], dim=1)

    def _check(self, g: GraphTensors) -> None:
        if g.variant != self.spec.variant:
            raise ValueError(f"graph variant {g.variant!r} != model {self.spec.variant!r}")
        if g.fixed_widths != self.fixed_widths:
            raise ValueError(
                f"shape mismatch: graph fixed widths {g.fixed_widths} != model {self.fixed_widths}"
            )
        if g.b_link.shape[1] != self.b_link_width:
            raise ValueError(
                f"missing baseline columns: b_link width {g.b_link.shape[1]}, "
                f"model expects {self.b_link_width}"
            )

    def forward(
        self,
        g: GraphTensors,
        head: str = "learned",
        capture: Optional[list[RoundState]] = None,
    ) -> Tensor:
        """Return per-path delay predictions for one sample.

        head="learned" uses the sigmoid readout; head="baseline" bypasses
        it and takes the b_link delay-factor column as the occupancy, so
        the output reproduces the queueing baseline b_path.
        """
        if head not in ("learned", "baseline"):
            raise ValueError(f"head must be 'learned' or 'baseline', got {head!r}")
        self._check(g)
        s = self.spec
        m1 = s.variant == "m1"
        P, L, N = g.n_paths, g.n_links, g.n_nodes
        if P == 0:
            return g.fixed.new_zeros((0,))

        hidden0 = self.input_transform(
            torch.cat([g.fixed, g.fixed.new_zeros((g.fixed.shape[0], s.hidden_total))], dim=1)
        )
        ph = hidden0[:P, : s.path_hidden]
        lh = hidden0[P : P + L, s.path_hidden : s.path_hidden + s.link_hidden]
        nh = hidden0[P + L :, s.path_hidden + s.link_hidden :] if m1 else None

        for convs in self.round_convs:
            if m1:
                x = self._assemble(g, ph, lh, nh)
                ph = self.act(convs["node_to_path"](x, g.edges["node_to_path"], P, 0))
            x = self._assemble(g, ph, lh, nh)
            state = x.new_zeros((P, s.path_hidden))
            for step in g.elp_steps:
                state = self.recurrent(x, state, step, P)
            ph = self.act(state / max(1, len(g.elp_steps)))
            ph = torch.cat([g.b_path, ph[:, 1:]], dim=1)
            if m1:
                x = self._assemble(g, ph, lh, nh)
                nh = self.act(convs["path_to_node"](x, g.edges["path_to_node"], N, P + L))
                x = self._assemble(g, ph, lh, nh)
                nh = nh + self.act(convs["link_to_node"](x, g.edges["link_to_node"], N, P + L))
                x = self._assemble(g, ph, lh, nh)
                lh = self.act(convs["node_to_link"](x, g.edges["node_to_link"], L, P))
            x = self._assemble(g, ph, lh, nh)
            lh = self.act(convs["path_to_link"](x, g.edges["path_to_link"], L, P))
            lh = torch.cat([g.b_link, lh[:, self.b_link_width :]], dim=1)
            if capture is not None:
                capture.append(
                    RoundState(
                        ph=ph.detach().clone(),
                        lh=lh.detach().clone(),
                        nh=nh.detach().clone() if nh is not None else None,
                    )
                )

        fw_path = self.fixed_widths[0]
        link_fixed = g.fixed[P : P + L, fw_path : fw_path + self.fixed_widths[1]]
        if head == "learned":
            u = torch.sigmoid(self.readout(torch.cat([link_fixed, lh], dim=1))).squeeze(-1)
        else:
            u = lh[:, self.b_link_width - 1]
        per_link = u * g.scale
        pred = per_link.new_zeros((P,))
        return pred.index_add(0, g.lp_dst, per_link[g.lp_src - P])


CHECKPOINT_FORMAT = "qtrn-gnn-checkpoint"


def checkpoint_payload(model: DelayFineTuner, **extra) -> dict:
    """Self-describing checkpoint dict for torch.save."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": 1,
        "model_spec": model.spec.to_dict(),
        "fixed_widths": list(model.fixed_widths),
        "b_link_width": model.b_link_width,
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    return payload


def model_from_payload(payload: dict) -> DelayFineTuner:
    """Rebuild a model from a checkpoint dict; raises on foreign files."""
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("incompatible checkpoint: not a qtrn-gnn checkpoint file")
    spec = ModelSpec.from_dict(payload["model_spec"])
    model = DelayFineTuner(
        spec, tuple(payload["fixed_widths"]), int(payload["b_link_width"])
    )
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise ValueError(f"incompatible checkpoint: {exc}") from exc
    return model
