"""INI experiment configuration: parsing, validation and serialization.

A config file drives the whole pipeline without code changes. Sections:

  [dataset]    index CSVs, root dir, transform pipeline and its parameters
  [network]    architecture settings (num_classes is mandatory)
  [training]   supervise_type, losses, optimizer and loop settings
  [testing]    checkpoint(s), sliding window, TTA, post-processing
  [semi_supervised_learning] / [weakly_supervised_learning] /
  [noisy_label_learning]     method name + paradigm hyperparameters
  [evaluation] ground-truth/prediction dirs and metric list (optional)

Unknown sections or keys are rejected by name; type and range errors name
the offending "[section] key". serialize_config(parse_config(f)) parses
back to an equal config.
"""

import configparser
import os
from dataclasses import dataclass, field

from .agents import AgentConfig
from .errors import ConfigError, MissingFileError
from .infer import InferSpec
from .losses import LossConfig
from .nets import NetworkSpec

_SUPERVISE_TYPES = ("fully_sup", "semi_sup", "weakly_sup", "noisy_label")

_SSL_METHODS = {
    "entropy_minimization": "ssl_em",
    "mean_teacher": "ssl_mt",
    "uamt": "ssl_uamt",
    "urpc": "ssl_urpc",
    "cct": "ssl_cct",
    "cps": "ssl_cps",
}
_WSL_METHODS = {
    "entropy_minimization": "wsl_em",
    "total_variation": "wsl_tv",
    "mumford_shah": "wsl_ms",
    "gated_crf": "wsl_gatedcrf",
    "ustm": "wsl_ustm",
    "dmpls": "wsl_dmpls",
}
_NLL_METHODS = {
    "gce": "nll_robustloss",
    "mae": "nll_robustloss",
    "noise_robust_dice": "nll_robustloss",
    "coteaching": "nll_coteaching",
    "clslsr": "nll_clslsr",
    "trinet": "nll_trinet",
    "dast": "nll_dast",
}
_PARADIGM_SECTION = {
    "semi_sup": ("semi_supervised_learning", _SSL_METHODS),
    "weakly_sup": ("weakly_supervised_learning", _WSL_METHODS),
    "noisy_label": ("noisy_label_learning", _NLL_METHODS),
}

# key -> (type tag, default); tags: str, int, float, bool, strs, ints, floats
_SCHEMA = {
    "dataset": {
        "root_dir": ("str", "."),
        "train_csv": ("str", None),
        "valid_csv": ("str", None),
        "test_csv": ("str", None),
        "unlabeled_csv": ("str", None),
        "transforms": ("strs", ("normalize_minmax",)),
        "test_transforms": ("strs", ("normalize_minmax",)),
        "cache": ("bool", True),
        "ignore_value": ("int", None),
        "gamma_range": ("floats", (0.7, 1.5)),
        "noise_std": ("float", 0.05),
        "flip_axes": ("ints", None),
        "crop_size": ("ints", None),
        "rotate_angle_range": ("floats", (-15.0, 15.0)),
        "rescale_range": ("floats", (0.9, 1.1)),
        "pad_to_size": ("ints", None),
    },
    "network": {
        "dims": ("int", 2),
        "in_channels": ("int", 1),
        "num_classes": ("int", None),   # mandatory
        "feature_widths": ("ints", None),
        "dropout": ("floats", None),
        "variant": ("str", "plain"),
        "num_aux_decoders": ("int", 2),
        "aux_noise_amplitude": ("float", 0.3),
        "aux_dropout_rate": ("float", 0.5),
    },
    "training": {
        "supervise_type": ("str", "fully_sup"),
        "loss_type": ("strs", ("dice", "cross_entropy")),
        "loss_weight": ("floats", None),
        "gce_q": ("float", 0.7),
        "focal_gamma": ("float", 2.0),
        "nr_dice_gamma": ("float", 1.5),
        "explog_gamma": ("float", 0.3),
        "explog_w_dice": ("float", 0.8),
        "explog_w_ce": ("float", 0.2),
        "base_lr": ("float", 1e-3),
        "max_iterations": ("int", 1000),
        "validation_interval": ("int", 100),
        "batch_size": ("int", 4),
        "checkpoint_dir": ("str", "checkpoints"),
        "seed": ("int", 0),
        "lr_patience": ("int", 10),
        "lr_factor": ("float", 0.5),
    },
    "testing": {
        "checkpoint": ("str", None),
        "checkpoints": ("strs", None),
        "window": ("ints", None),
        "stride": ("ints", None),
        "tta": ("strs", ()),
        "post_process": ("str", "none"),
        "output_dir": ("str", "predictions"),
    },
    "semi_supervised_learning": {
        "method": ("str", None),
        "lambda_max": ("float", 0.1),
        "ramp_length": ("int", 0),
        "ema_alpha": ("float", 0.99),
        "mc_passes": ("int", 4),
        "input_noise_std": ("float", 0.05),
        "unlabeled_batch_size": ("int", None),
    },
    "weakly_supervised_learning": {
        "method": ("str", None),
        "lambda_max": ("float", 0.1),
        "ramp_length": ("int", 0),
        "ema_alpha": ("float", 0.99),
        "mc_passes": ("int", 4),
    },
    "noisy_label_learning": {
        "method": ("str", None),
        "lambda_max": ("float", 0.1),
        "ramp_length": ("int", 0),
        "select_ratio": ("float", 0.2),
        "rank_fraction": ("float", 0.8),
        "smoothing": ("float", 0.2),
        "relabel_at": ("int", 0),
    },
    "evaluation": {
        "gt_dir": ("str", None),
        "pred_dir": ("str", None),
        "classes": ("ints", None),
        "metrics": ("strs", ("dice",)),
        "output_csv": ("str", "metrics.csv"),
    },
}

_POST_PROCESS = ("none", "largest_component", "largest_component_global")


def _parse_value(section, key, tag, raw):
    raw = raw.strip()
    if raw.lower() in ("", "none"):
        return None
    try:
        if tag == "str":
            return raw
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if tag == "strs":
            return tuple(parts)
        if tag == "ints":
            return tuple(int(p) for p in parts)
        if tag == "floats":
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: expected {tag}, got '{raw}'"
        ) from None
    raise ConfigError(f"[{section}] {key}: unhandled type tag '{tag}'")


@dataclass
class ExperimentConfig:
    """Typed view of one INI file; see module docstring for the sections."""

    sections: dict
    explicit: set = field(default_factory=set, compare=False)
    path: str = field(default="", compare=False)

    def get(self, section, key):
        return self.sections[section][key]

    def was_set(self, section, key):
        return (section, key) in self.explicit

    # -- derived spec objects ------------------------------------------------

    def to_network_spec(self):
        net = self.sections["network"]
        if net["num_classes"] is None:
            raise ConfigError("[network] num_classes is mandatory")
        kwargs = dict(
            dims=net["dims"],
            in_channels=net["in_channels"],
            num_classes=net["num_classes"],
            variant=net["variant"],
            num_aux_decoders=net["num_aux_decoders"],
            aux_noise_amplitude=net["aux_noise_amplitude"],
            aux_dropout_rate=net["aux_dropout_rate"],
        )
        if net["feature_widths"] is not None:
            kwargs["feature_widths"] = net["feature_widths"]
        if net["dropout"] is not None:
            kwargs["dropout"] = net["dropout"]
        try:
            return NetworkSpec(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"[network] {exc}") from None

    def to_loss_config(self):
        tr = self.sections["training"]
        names = tuple(tr["loss_type"])
        weights = tr["loss_weight"]
        if weights is None:
            weights = (1.0 / len(names),) * len(names)
        try:
            return LossConfig(
                names=names,
                weights=tuple(weights),
                q=tr["gce_q"],
                gamma_focal=tr["focal_gamma"],
                gamma_nr=tr["nr_dice_gamma"],
                gamma_exp=tr["explog_gamma"],
                explog_w_dice=tr["explog_w_dice"],
                explog_w_ce=tr["explog_w_ce"],
                ignore_value=self._ignore_value(),
            )
        except ValueError as exc:
            raise ConfigError(f"[training] {exc}") from None

    def _ignore_value(self):
        ds = self.sections["dataset"]
        if ds["ignore_value"] is not None:
            return ds["ignore_value"]
        n = self.sections["network"]["num_classes"]
        return None if n is None else int(n)

    def _paradigm_method(self):
        st = self.sections["training"]["supervise_type"]
        if st == "fully_sup":
            return None
        section, methods = _PARADIGM_SECTION[st]
        method = self.sections[section]["method"]
        if method is None:
            raise ConfigError(f"[{section}] method is mandatory for supervise_type={st}")
        if method not in methods:
            raise ConfigError(
                f"[{section}] method '{method}' unknown; known: {sorted(methods)}"
            )
        return method

    def paradigm_name(self):
        st = self.sections["training"]["supervise_type"]
        if st == "fully_sup":
            return "fully_sup"
        section, methods = _PARADIGM_SECTION[st]
        return methods[self._paradigm_method()]

    def to_agent_config(self):
        tr = self.sections["training"]
        st = tr["supervise_type"]
        paradigm = self.paradigm_name()
        kwargs = dict(
            paradigm=paradigm,
            max_iterations=tr["max_iterations"],
            validation_interval=tr["validation_interval"],
            base_lr=tr["base_lr"],
            n_labeled=tr["batch_size"],
            n_unlabeled=0,
            seed=tr["seed"],
            lr_patience=tr["lr_patience"],
            lr_factor=tr["lr_factor"],
            checkpoint_dir=tr["checkpoint_dir"],
            ignore_value=self._ignore_value(),
            network=self.to_network_spec(),
            loss=self.to_loss_config(),
        )
        if st == "semi_sup":
            ssl = self.sections["semi_supervised_learning"]
            n_unlab = ssl["unlabeled_batch_size"]
            kwargs.update(
                n_unlabeled=tr["batch_size"] if n_unlab is None else n_unlab,
                lambda_max=ssl["lambda_max"],
                ramp_length=ssl["ramp_length"],
                ema_alpha=ssl["ema_alpha"],
                mc_passes=ssl["mc_passes"],
                input_noise_std=ssl["input_noise_std"],
            )
        elif st == "weakly_sup":
            wsl = self.sections["weakly_supervised_learning"]
            kwargs.update(
                lambda_max=wsl["lambda_max"],
                ramp_length=wsl["ramp_length"],
                ema_alpha=wsl["ema_alpha"],
                mc_passes=wsl["mc_passes"],
            )
        elif st == "noisy_label":
            nll = self.sections["noisy_label_learning"]
            kwargs.update(
                lambda_max=nll["lambda_max"],
                ramp_length=nll["ramp_length"],
                select_ratio_final=nll["select_ratio"],
                rank_fraction=nll["rank_fraction"],
                smoothing=nll["smoothing"],
                relabel_at=nll["relabel_at"],
            )
        return AgentConfig(**kwargs)

    def to_infer_spec(self):
        te = self.sections["testing"]
        ckpts = te["checkpoints"]
        if ckpts is None:
            ckpts = (te["checkpoint"],) if te["checkpoint"] else ()
        try:
            return InferSpec(
                window=te["window"],
                stride=te["stride"],
                tta_transforms=te["tta"],
                checkpoints=ckpts,
            )
        except ValueError as exc:
            raise ConfigError(f"[testing] {exc}") from None

    def transform_params(self):
        ds = self.sections["dataset"]
        return {
            "gamma_range": ds["gamma_range"],
            "noise_std": ds["noise_std"],
            "flip_axes": ds["flip_axes"],
            "crop_size": ds["crop_size"],
            "rotate_angle_range": ds["rotate_angle_range"],
            "rescale_range": ds["rescale_range"],
            "pad_to_size": ds["pad_to_size"],
        }

    def resolve_path(self, rel):
        root = self.sections["dataset"]["root_dir"]
        return rel if os.path.isabs(rel) else os.path.join(root, rel)


def parse_config(path):
    """Read, type-check and validate an INI file into an ExperimentConfig."""
    if not os.path.isfile(path):
        raise MissingFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None

    if not parser.has_section("dataset"):
        raise ConfigError("missing mandatory section [dataset]")
    if not parser.has_section("network"):
        raise ConfigError("missing mandatory section [network]")

    sections, explicit = {}, set()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown section [{section}]; known: {sorted(_SCHEMA)}"
            )
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key '[{section}] {key}'; "
                    f"known keys: {sorted(_SCHEMA[section])}"
                )
    for section, keys in _SCHEMA.items():
        values = {}
        for key, (tag, default) in keys.items():
            if parser.has_option(section, key):
                values[key] = _parse_value(section, key, tag, parser[section][key])
                explicit.add((section, key))
            else:
                values[key] = default
        sections[section] = values

    config = ExperimentConfig(sections=sections, explicit=explicit, path=str(path))
    _validate(config)
    return config


def _validate(config):
    tr = config.sections["training"]
    if tr["supervise_type"] not in _SUPERVISE_TYPES:
        raise ConfigError(
            f"[training] supervise_type '{tr['supervise_type']}' unknown; "
            f"known: {_SUPERVISE_TYPES}"
        )
    # a robust-loss method IS the loss choice; bake it in unless overridden,
    # and resolve default weights, so serialization captures actual behavior
    method = config._paradigm_method()
    if method in ("gce", "mae", "noise_robust_dice") and not config.was_set(
        "training", "loss_type"
    ):
        tr["loss_type"] = (method,)
        tr["loss_weight"] = (1.0,)
    if tr["loss_weight"] is None:
        n = len(tr["loss_type"])
        tr["loss_weight"] = (1.0 / n,) * n
    te = config.sections["testing"]
    if te["post_process"] is None:
        # "none" parses to None like any cleared value; both mean no-op here
        te["post_process"] = "none"
    if te["post_process"] not in _POST_PROCESS:
        raise ConfigError(
            f"[testing] post_process '{te['post_process']}' unknown; known: {_POST_PROCESS}"
        )
    for section in ("semi_supervised_learning", "weakly_supervised_learning"):
        alpha = config.sections[section]["ema_alpha"]
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"[{section}] ema_alpha must be in [0, 1], got {alpha}")
    nll = config.sections["noisy_label_learning"]
    if not 0.0 <= nll["select_ratio"] <= 1.0:
        raise ConfigError(
            f"[noisy_label_learning] select_ratio must be in [0, 1], got {nll['select_ratio']}"
        )
    if not 0.0 < nll["rank_fraction"] <= 1.0:
        raise ConfigError(
            f"[noisy_label_learning] rank_fraction must be in (0, 1], got {nll['rank_fraction']}"
        )
    if not 0.0 <= nll["smoothing"] <= 1.0:
        raise ConfigError(
            f"[noisy_label_learning] smoothing must be in [0, 1], got {nll['smoothing']}"
        )

    ds = config.sections["dataset"]
    for key in ("train_csv", "valid_csv", "test_csv", "unlabeled_csv"):
        if ds[key] is not None:
            full = config.resolve_path(ds[key])
            if not os.path.isfile(full):
                raise MissingFileError(f"[dataset] {key}: file not found: {full}")

    # construct the derived objects once so their own validation runs now
    from .transforms import build_pipeline

    config.to_network_spec()
    config.to_loss_config()
    config.to_infer_spec()
    config.to_agent_config()
    params = config.transform_params()
    build_pipeline(ds["transforms"], params)
    build_pipeline(ds["test_transforms"], params)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config):
    """Render a full INI text; parse_config on it yields an equal config."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = config.sections[section][key]
            if value is None or (isinstance(value, (tuple, list)) and not value):
                # empty lists only arise as schema defaults; an empty raw
                # value would have parsed to None, so drop the line
                continue
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
