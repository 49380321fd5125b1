"""Run configuration: one JSON document covering net, sampler, train, and
metric settings.

Every field is optional and falls back to the module defaults.  Unknown
keys are rejected before any work starts, and the error names every
offending key (dotted paths), not just the first one found.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from . import net
from .distance import DistanceMetric
from .errors import ConfigError
from .losses import AngularConfig, ContrastiveConfig
from .sampling import BissScorer, SamplerConfig
from .training import TrainConfig

_TOP_KEYS = {"net", "sampler", "train", "metric"}
_NET_KEYS = {"input_shape", "final_embed_dim", "dropout_rate", "branches"}
_BRANCH_KEYS = {"input_downsample_factor", "conv_layers",
                "branch_embed_dim"}
_CONV_KEYS = {"filters", "kernel", "stride", "padding", "pool_after"}
_SAMPLER_KEYS = {"n_candidates", "in_class_fraction", "rng_seed",
                 "strategy", "self_pair_fraction", "scorer"}
_SCORER_KEYS = {"kind", "bins"}
_TRAIN_KEYS = {"learning_rate", "rms_decay", "epsilon", "epochs",
               "batch_size", "loss", "loss_metric_exponent",
               "augmentation", "weight_decay", "seed", "lr_decay",
               "pos_fraction", "batches_per_epoch", "val_pairs",
               "val_triplets"}
_LOSS_KEYS_CONTRASTIVE = {"kind", "margin", "hinge_variant"}
_LOSS_KEYS_ANGULAR = {"kind", "alpha_degrees", "formula_variant"}
_METRIC_KEYS = {"exponent"}


@dataclass(frozen=True)
class RunConfig:
    net: net.MultiScaleNetConfig = field(
        default_factory=net.desk_scale_config)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metric: DistanceMetric = field(default_factory=DistanceMetric)
    scorer: BissScorer = field(default_factory=BissScorer)


def _collect_unknown(section: Mapping[str, Any], allowed: set[str],
                     prefix: str, offenders: list[str]) -> None:
    for key in section:
        if key not in allowed:
            offenders.append(f"{prefix}{key}")


def _require_mapping(value: Any, where: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be a JSON object, "
                          f"got {type(value).__name__}")
    return value


def _parse_net(section: Mapping[str, Any],
               offenders: list[str]) -> net.MultiScaleNetConfig:
    _collect_unknown(section, _NET_KEYS, "net.", offenders)
    input_shape = tuple(section.get("input_shape", (1, 28, 28)))
    final_dim = int(section.get("final_embed_dim", 64))
    if "branches" not in section:
        cfg = net.desk_scale_config(input_shape=input_shape,
                                    final_embed_dim=final_dim)
        if "dropout_rate" in section:
            cfg = replace(cfg, dropout_rate=float(section["dropout_rate"]))
        return cfg
    branches = []
    for bi, branch in enumerate(section["branches"]):
        branch = _require_mapping(branch, f"net.branches[{bi}]")
        _collect_unknown(branch, _BRANCH_KEYS, f"net.branches[{bi}].",
                         offenders)
        convs = []
        for ci, conv in enumerate(branch.get("conv_layers", ())):
            conv = _require_mapping(
                conv, f"net.branches[{bi}].conv_layers[{ci}]")
            _collect_unknown(
                conv, _CONV_KEYS,
                f"net.branches[{bi}].conv_layers[{ci}].", offenders)
            convs.append(net.ConvSpec(
                filters=int(conv["filters"]),
                kernel=int(conv["kernel"]),
                stride=int(conv.get("stride", 1)),
                padding=int(conv.get("padding", 0)),
                pool_after=bool(conv.get("pool_after", False))))
        branches.append(net.BranchSpec(
            input_downsample_factor=int(
                branch.get("input_downsample_factor", 1)),
            conv_layers=tuple(convs),
            branch_embed_dim=int(branch["branch_embed_dim"])))
    if offenders:
        # config invalid anyway; skip construction that may also throw
        return net.desk_scale_config()
    return net.MultiScaleNetConfig(
        branches=tuple(branches), final_embed_dim=final_dim,
        input_shape=input_shape,
        dropout_rate=float(section.get("dropout_rate", 0.25)))


def _parse_scorer(section: Mapping[str, Any],
                  offenders: list[str]) -> BissScorer:
    _collect_unknown(section, _SCORER_KEYS, "sampler.scorer.", offenders)
    if offenders:
        return BissScorer()
    kwargs: dict[str, Any] = {}
    if "kind" in section:
        kwargs["kind"] = str(section["kind"])
    if "bins" in section:
        kwargs["bins"] = int(section["bins"])
    return BissScorer(**kwargs)


def _parse_sampler(section: Mapping[str, Any], offenders: list[str]
                   ) -> tuple[SamplerConfig, BissScorer]:
    _collect_unknown(section, _SAMPLER_KEYS, "sampler.", offenders)
    scorer = BissScorer()
    if "scorer" in section:
        scorer = _parse_scorer(
            _require_mapping(section["scorer"], "sampler.scorer"),
            offenders)
    if offenders:
        return SamplerConfig(), scorer
    kwargs = {k: section[k] for k in
              ("n_candidates", "in_class_fraction", "rng_seed", "strategy",
               "self_pair_fraction") if k in section}
    return SamplerConfig(**kwargs), scorer


def _parse_loss(section: Mapping[str, Any], offenders: list[str]
                ) -> ContrastiveConfig | AngularConfig:
    kind = section.get("kind", "contrastive")
    if kind == "contrastive":
        _collect_unknown(section, _LOSS_KEYS_CONTRASTIVE, "train.loss.",
                         offenders)
        if offenders:
            return ContrastiveConfig()
        kwargs = {}
        if "margin" in section:
            kwargs["margin"] = float(section["margin"])
        if "hinge_variant" in section:
            kwargs["hinge_variant"] = str(section["hinge_variant"])
        return ContrastiveConfig(**kwargs)
    if kind == "angular":
        _collect_unknown(section, _LOSS_KEYS_ANGULAR, "train.loss.",
                         offenders)
        if offenders:
            return AngularConfig()
        kwargs = {}
        if "alpha_degrees" in section:
            kwargs["alpha_degrees"] = float(section["alpha_degrees"])
        if "formula_variant" in section:
            kwargs["formula_variant"] = str(section["formula_variant"])
        return AngularConfig(**kwargs)
    raise ConfigError(
        f"train.loss.kind must be 'contrastive' or 'angular', got {kind!r}")


def _parse_train(section: Mapping[str, Any],
                 offenders: list[str]) -> TrainConfig:
    _collect_unknown(section, _TRAIN_KEYS, "train.", offenders)
    loss = ContrastiveConfig()
    if "loss" in section:
        loss = _parse_loss(_require_mapping(section["loss"], "train.loss"),
                           offenders)
    if offenders:
        return TrainConfig()
    kwargs: dict[str, Any] = {"loss": loss}
    for key in ("learning_rate", "rms_decay", "epsilon",
                "loss_metric_exponent", "weight_decay", "lr_decay",
                "pos_fraction"):
        if key in section:
            kwargs[key] = float(section[key])
    for key in ("epochs", "batch_size", "seed", "val_pairs",
                "val_triplets"):
        if key in section:
            kwargs[key] = int(section[key])
    if section.get("batches_per_epoch") is not None:
        kwargs["batches_per_epoch"] = int(section["batches_per_epoch"])
    if "augmentation" in section:
        kwargs["augmentation"] = frozenset(
            str(a) for a in section["augmentation"])
    return TrainConfig(**kwargs)


def parse_run_config(document: str | Mapping[str, Any]) -> RunConfig:
    """Parse a JSON document (or an already-decoded mapping).

    Raises ``ConfigError`` listing every unknown key if any section
    contains one.
    """
    if isinstance(document, str):
        try:
            decoded = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    else:
        decoded = document
    decoded = _require_mapping(decoded, "config root")

    offenders: list[str] = []
    _collect_unknown(decoded, _TOP_KEYS, "", offenders)

    net_cfg = net.desk_scale_config()
    if "net" in decoded:
        net_cfg = _parse_net(_require_mapping(decoded["net"], "net"),
                             offenders)
    sampler_cfg, scorer = SamplerConfig(), BissScorer()
    if "sampler" in decoded:
        sampler_cfg, scorer = _parse_sampler(
            _require_mapping(decoded["sampler"], "sampler"), offenders)
    train_cfg = TrainConfig()
    if "train" in decoded:
        train_cfg = _parse_train(
            _require_mapping(decoded["train"], "train"), offenders)
    metric = DistanceMetric()
    if "metric" in decoded:
        metric_section = _require_mapping(decoded["metric"], "metric")
        _collect_unknown(metric_section, _METRIC_KEYS, "metric.",
                         offenders)
        if not offenders and "exponent" in metric_section:
            metric = DistanceMetric(float(metric_section["exponent"]))

    if offenders:
        raise ConfigError(
            "unknown config keys: " + ", ".join(sorted(offenders)))
    return RunConfig(net=net_cfg, sampler=sampler_cfg, train=train_cfg,
                     metric=metric, scorer=scorer)


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())
