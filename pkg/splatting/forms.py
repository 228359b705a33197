"""RunConfig: INI-style run files validated section by section with django.forms.

Every field carries its default as ``initial`` and a provenance tag as
``help_text``: ``published`` for constants of the published method, ``desk``
for defaults chosen for desk-scale runs.
"""
import configparser
from pathlib import Path

from django import forms

from probability.attributes import ActivationConfig
from probability.pyramid import PyramidConfig
from probability.sampler import ContractionConfig

from .losses import LossConfig
from .renderer import RenderOptions
from .scenes import SceneSpec
from .trainer import TRAIN_ESTIMATORS, TrainConfig

PUBLISHED = "published"
DESK = "desk"


class RunConfigError(ValueError):
    pass


def _int(initial, provenance, label, min_value=None, required=True):
    return forms.IntegerField(initial=initial, help_text=provenance, label=label, min_value=min_value,
                              required=required)


def _float(initial, provenance, label, min_value=None, max_value=None):
    return forms.FloatField(initial=initial, help_text=provenance, label=label, min_value=min_value,
                            max_value=max_value)


def _bool(initial, provenance, label):
    return forms.BooleanField(initial=initial, help_text=provenance, label=label, required=False)


class PyramidForm(forms.Form):
    dims = _int(3, DESK, "spatial dimensions", 1)
    levels = _int(6, DESK, "pyramid levels", 1)
    base_resolution = _int(2, PUBLISHED, "level-0 resolution per axis", 1)
    budget = _int(4096, DESK, "hash table rows per level, 0 for unlimited", 0)

    def to_config(self) -> PyramidConfig:
        data = dict(self.cleaned_data)
        data["budget"] = data["budget"] or None
        return PyramidConfig(**data)


class ContractionForm(forms.Form):
    a = _float(0.75, PUBLISHED, "inner cube half-width after contraction", 0.0, 1.0)

    def to_config(self) -> ContractionConfig:
        return ContractionConfig(**self.cleaned_data)


class AttributesForm(forms.Form):
    o0 = _float(0.05, PUBLISHED, "initial opacity", 0.0, 1.0)
    s0 = _float(0.0006, PUBLISHED, "initial scale in unit-cube units", 0.0)
    sh_alpha = _float(0.2, PUBLISHED, "per-degree spherical harmonic weight", 0.0)

    def to_config(self) -> ActivationConfig:
        return ActivationConfig(**self.cleaned_data)


class LossForm(forms.Form):
    lambda_l1 = _float(0.8, PUBLISHED, "L1 share of the image loss", 0.0, 1.0)
    lambda_opacity = _float(0.05, PUBLISHED, "opacity sparsity weight", 0.0)
    lambda_scale = _float(0.02, PUBLISHED, "scale sparsity weight", 0.0)
    lambda_color = _float(1e-3, PUBLISHED, "colour sparsity weight", 0.0)
    tau = _float(0.05, PUBLISHED, "opacity threshold of the sparsity term", 0.0, 1.0)
    sh_decay = _float(0.2, PUBLISHED, "colour-sparsity weight of degree-1 coefficients", 0.0)
    reduction = forms.ChoiceField(choices=[("mean", "mean"), ("sum", "sum")], initial="mean", help_text=DESK,
                                  label="regulariser reduction over frustum primitives")

    def to_config(self) -> LossConfig:
        return LossConfig(**self.cleaned_data)


class TrainForm(forms.Form):
    samples = _int(20000, DESK, "samples per iteration (published: 1.5e7)", 1)
    iterations = _int(5000, DESK, "probabilistic iterations (published: 30000)", 0)
    refine_iters = _int(500, DESK, "refinement iterations (published: 5000)", 0)
    min_unique = _int(None, DESK, "unique-primitive floor, empty for half of samples", 0, required=False)
    max_topups = _int(4, DESK, "resampling rounds allowed per iteration", 0)
    lr_logits = _float(0.02, DESK, "Adam step for pyramid logits", 0.0)
    lr_opacity = _float(0.05, DESK, "Adam step for opacity entries", 0.0)
    lr_scale = _float(5e-3, DESK, "Adam step for scale entries", 0.0)
    lr_color = _float(2.5e-3, DESK, "Adam step for colour entries", 0.0)
    lr_position = _float(1.6e-4, DESK, "refinement position step when positions are free", 0.0)
    refine_lr_opacity = _float(5e-3, PUBLISHED, "refinement opacity step", 0.0)
    lr_decay = _float(1.0, DESK, "per-iteration learning-rate multiplier", 0.0, 1.0)
    background_max = _float(0.5, PUBLISHED, "upper bound of the random background colour", 0.0, 1.0)
    estimator = forms.ChoiceField(choices=[(k, k) for k in TRAIN_ESTIMATORS], initial="control_variate",
                                  help_text=PUBLISHED, label="logit gradient estimator")
    duplicate_policy = forms.ChoiceField(choices=[("exact", "exact"), ("multiplicity", "multiplicity")],
                                         initial="exact", help_text=DESK, label="control-variate duplicate rule")
    rounding = _bool(True, PUBLISHED, "round samples to finest-bin centres")
    defensive = _bool(True, PUBLISHED, "defensive position noise")
    noise_sigma0 = _float(2e-3, PUBLISHED, "initial defensive noise sigma", 0.0)
    noise_fraction = _float(0.2, PUBLISHED, "fraction of samples perturbed", 0.0, 1.0)
    noise_anneal_iters = _int(20000, PUBLISHED, "iterations until the noise reaches zero", 1)
    independent_levels = _bool(False, DESK, "fresh uniform per pyramid level")
    freeze_positions = _bool(True, PUBLISHED, "keep positions fixed during refinement")
    capacity = _int(None, DESK, "attribute table rows, empty for min(bins, 4 * samples)", 1, required=False)
    eval_every = _int(250, DESK, "held-out evaluation interval, 0 disables", 0)
    eval_samples = _int(None, DESK, "samples for held-out evaluation, empty for samples", 1, required=False)
    checkpoint_every = _int(1000, DESK, "checkpoint interval, 0 for the final one only", 0)
    opacity_reg = _bool(True, PUBLISHED, "opacity sparsity term on")
    scale_reg = _bool(True, PUBLISHED, "scale sparsity term on")

    def clean(self):
        cleaned = super().clean()
        if cleaned.get("estimator") == "pathwise" and cleaned.get("rounding"):
            self.add_error("rounding", "the pathwise estimator needs rounding = false")
        minimum = cleaned.get("min_unique")
        if minimum is not None and cleaned.get("samples") is not None and minimum > cleaned["samples"]:
            self.add_error("min_unique", "must not exceed samples")
        return cleaned


class RenderForm(forms.Form):
    alpha_max = _float(0.999, DESK, "alpha clamp", 0.0, 1.0)
    footprint_sigmas = _float(3.0, DESK, "footprint radius in sigmas", 0.0)
    pixel_dilation = _float(0.3, DESK, "low-pass variance added per splat, px^2", 0.0)
    render_cap = _int(0, DESK, "max primitives per render, 0 for no cap (published: 7.5e6)", 0)

    def to_config(self, seed: int = 0) -> RenderOptions:
        data = dict(self.cleaned_data)
        data["render_cap"] = data["render_cap"] or None
        return RenderOptions(cap_seed=seed, **data)


class SceneForm(forms.Form):
    primitives = _int(200, DESK, "ground-truth primitives", 0)
    cameras = _int(20, DESK, "cameras on the ring", 1)
    heldout_every = _int(5, DESK, "every k-th camera is held out", 1)
    ring_radius = _float(2.0, DESK, "camera ring radius", 0.0)
    ring_height = _float(0.6, DESK, "camera ring height", None)
    object_radius = _float(0.8, DESK, "radius of the primitive ball", 0.0)
    scale_min = _float(0.04, DESK, "smallest primitive scale", 0.0)
    scale_max = _float(0.1, DESK, "largest primitive scale", 0.0)
    opacity_min = _float(0.6, DESK, "smallest opacity", 0.0, 1.0)
    opacity_max = _float(0.95, DESK, "largest opacity", 0.0, 1.0)
    width = _int(64, DESK, "image width", 1)
    height = _int(64, DESK, "image height", 1)

    def to_config(self, seed: int = 0) -> SceneSpec:
        return SceneSpec(seed=seed, **self.cleaned_data)


class BenchForm(forms.Form):
    dims = forms.TypedChoiceField(choices=[(1, "1"), (3, "3")], coerce=int, initial=1, help_text=DESK,
                                  label="1 for the additive model, 3 for the splat renderer")
    estimators = forms.CharField(initial="joint_score,marginal_1d", help_text=DESK, label="comma-separated estimators")
    repeats = _int(100, PUBLISHED, "independent estimates per setting", 30)
    sample_counts = forms.CharField(initial="4,16,64,256", help_text=DESK, label="comma-separated sample counts")
    levels = _int(6, DESK, "pyramid levels of the additive model", 1)
    resolution = _int(16, PUBLISHED, "grid resolution of the splat setup", 1)
    image_size = _int(32, PUBLISHED, "image size of the splat setup", 1)
    rounding = _bool(False, DESK, "round samples in the additive model")

    def clean_estimators(self):
        return [e.strip() for e in self.cleaned_data["estimators"].split(",") if e.strip()]

    def clean_sample_counts(self):
        try:
            counts = [int(v) for v in self.cleaned_data["sample_counts"].split(",") if v.strip()]
        except ValueError:
            raise forms.ValidationError("expected comma-separated integers")
        if not counts or min(counts) < 1:
            raise forms.ValidationError("sample counts must be positive")
        return counts


class RunForm(forms.Form):
    preset = forms.ChoiceField(choices=[(DESK, DESK), (PUBLISHED, PUBLISHED)], initial=DESK, help_text=DESK,
                               label="named default set")
    seed = _int(0, DESK, "master seed", 0)
    threads = _int(0, DESK, "worker cap, 0 for HPP_THREADS", 0)
    output_dir = forms.CharField(initial="", required=False, help_text=DESK, label="output directory")


SECTIONS = {
    "pyramid": PyramidForm,
    "contraction": ContractionForm,
    "attributes": AttributesForm,
    "loss": LossForm,
    "train": TrainForm,
    "render": RenderForm,
    "scene": SceneForm,
    "bench": BenchForm,
    "run": RunForm,
}

PRESETS = {
    DESK: {},
    PUBLISHED: {
        "pyramid": {"levels": 12, "base_resolution": 2, "budget": 2 ** 18},
        "train": {"samples": 15_000_000, "iterations": 30000, "refine_iters": 5000},
        "render": {"render_cap": 7_500_000},
    },
}


def _as_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def defaults() -> dict:
    return {
        name: {key: _as_text(field.initial) for key, field in form_class.base_fields.items()}
        for name, form_class in SECTIONS.items()
    }


def describe() -> str:
    """Every key with its default and provenance, one per line."""
    lines = []
    for name, form_class in SECTIONS.items():
        lines.append(f"[{name}]")
        for key, field in form_class.base_fields.items():
            lines.append(f"  {key} = {_as_text(field.initial)}  ({field.help_text}) {field.label}")
    return "\n".join(lines)


class RunConfig:
    """Cleaned values per section, built from defaults, preset, file and overrides in that order."""

    def __init__(self, text: str = "", overrides=None, source: str = "<config>"):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise RunConfigError(f"{source}: {exc.message.splitlines()[0]}") from None
        from_file = {section: dict(parser.items(section)) for section in parser.sections()}
        overrides = {s: {k: _as_text(v) for k, v in values.items() if v is not None}
                     for s, values in (overrides or {}).items()}
        for layer in (from_file, overrides):
            for section, values in layer.items():
                if section not in SECTIONS:
                    raise RunConfigError(f"unknown section [{section}]")
                unknown = sorted(set(values) - set(SECTIONS[section].base_fields))
                if unknown:
                    raise RunConfigError(f"unknown key {section}.{unknown[0]}")

        raw = defaults()
        preset = overrides.get("run", {}).get("preset") or from_file.get("run", {}).get("preset") or DESK
        if preset not in PRESETS:
            raise RunConfigError(f"unknown preset {preset!r}")
        for layer in (PRESETS[preset], from_file, overrides):
            for section, values in layer.items():
                raw[section].update({k: _as_text(v) for k, v in values.items()})

        self.forms = {}
        for section, form_class in SECTIONS.items():
            form = form_class(data=raw[section])
            if not form.is_valid():
                key, errors = next(iter(form.errors.items()))
                where = section if key == "__all__" else f"{section}.{key}"
                raise RunConfigError(f"{where}: {errors[0]}")
            self.forms[section] = form
        self.raw = raw

    @classmethod
    def from_file(cls, path=None, overrides=None) -> "RunConfig":
        if path is None:
            return cls("", overrides)
        path = Path(path)
        if not path.exists():
            raise RunConfigError(f"config file {path} not found")
        return cls(path.read_text(), overrides, str(path))

    def section(self, name: str) -> dict:
        return self.forms[name].cleaned_data

    @property
    def seed(self) -> int:
        return self.section("run")["seed"]

    @property
    def threads(self):
        return self.section("run")["threads"] or None

    def _build(self, factory, *args):
        try:
            return factory(*args)
        except ValueError as exc:
            raise RunConfigError(str(exc)) from None

    def pyramid_config(self) -> PyramidConfig:
        return self._build(self.forms["pyramid"].to_config)

    def contraction_config(self) -> ContractionConfig:
        return self._build(self.forms["contraction"].to_config)

    def activation_config(self) -> ActivationConfig:
        return self._build(self.forms["attributes"].to_config)

    def render_options(self) -> RenderOptions:
        return self._build(self.forms["render"].to_config, self.seed)

    def scene_spec(self) -> SceneSpec:
        return self._build(self.forms["scene"].to_config, self.seed)

    def loss_config(self) -> LossConfig:
        data = dict(self.section("loss"))
        train = self.section("train")
        if not train["opacity_reg"]:
            data["lambda_opacity"] = 0.0
        if not train["scale_reg"]:
            data["lambda_scale"] = 0.0
        return self._build(lambda: LossConfig(**data))

    def train_config(self) -> TrainConfig:
        data = {k: v for k, v in self.section("train").items() if k not in ("opacity_reg", "scale_reg")}
        return self._build(lambda: TrainConfig(seed=self.seed, threads=self.threads, **data))

    def to_text(self) -> str:
        """The effective configuration as an INI file with provenance comments."""
        lines = []
        for section, form_class in SECTIONS.items():
            lines.append(f"[{section}]")
            for key, field in form_class.base_fields.items():
                lines.append(f"# {field.label} ({field.help_text})")
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)
