"""Model manifests: the network description authored against the operator library.

A manifest is TOML::

    format = "qdeploy-manifest"
    version = 1
    name = "tiny"
    scheme = "symmetric_pow2"        # | "asymmetric" | "fp32"
    preprocess = "batch_norm_like"   # | "mean_image" | "per_image_standardization" | "none"

    [input]
    shape = [32, 32, 3]
    dtype = "uint8"                  # "int8" needs frac_bits and preprocess = "none"

    [[layers]]
    kind = "conv2d"
    name = "conv1"
    out_channels = 16
    kernel = 5
    padding = 2
    activation = "relu"              # optional, applied in place after requantization
    weight_frac = "auto"             # or an integer frac_bits; same for bias_frac, out_frac

    [[layers]]
    kind = "maxpool"
    window = 2
    stride = 2

Only operators the int8 engine implements are accepted; anything else is an
``operator unavailable`` error at parse time.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ManifestError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MANIFEST_FORMAT = "qdeploy-manifest"
MANIFEST_VERSION = 1

LAYER_KINDS = ("conv2d", "fully_connected", "maxpool", "relu")
KIND_ALIASES = {"conv": "conv2d", "fc": "fully_connected", "dense": "fully_connected", "pool": "maxpool"}
SCHEMES = ("symmetric_pow2", "asymmetric", "fp32")
PREPROCESS = ("batch_norm_like", "mean_image", "per_image_standardization", "none")
SCHEME_ALIASES = {"kanji": "symmetric_pow2", "asym": "asymmetric", "fp32": "fp32"}
PREPROCESS_ALIASES = {
    "bnlike": "batch_norm_like",
    "meanimg": "mean_image",
    "pis": "per_image_standardization",
    "none": "none",
}
FORMAT_KEYS = ("weight_frac", "bias_frac", "out_frac")


@dataclass(frozen=True)
class InputSpec:
    shape: tuple[int, ...]
    dtype: str = "uint8"
    frac_bits: int | None = None


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    attrs: dict = field(default_factory=dict)
    formats: dict = field(default_factory=dict)  # key -> "auto" | int
    activation: str | None = None

    @property
    def weighted(self) -> bool:
        return self.kind in ("conv2d", "fully_connected")


@dataclass(frozen=True)
class ModelManifest:
    name: str
    input: InputSpec
    layers: tuple[LayerSpec, ...]
    scheme: str = "symmetric_pow2"
    preprocess: str = "batch_norm_like"
    preprocess_params: dict | None = None
    version: int = MANIFEST_VERSION

    def with_options(self, scheme: str | None = None, preprocess: str | None = None) -> "ModelManifest":
        m = replace(
            self,
            scheme=SCHEME_ALIASES.get(scheme, scheme) if scheme else self.scheme,
            preprocess=PREPROCESS_ALIASES.get(preprocess, preprocess) if preprocess else self.preprocess,
        )
        errors = _check_combination(m)
        if errors:
            raise ManifestError(errors)
        return m

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of each layer (per sample, HWC or flat)."""
        shapes, errors = infer_shapes(self.input.shape, self.layers)
        if errors:
            raise ManifestError(errors)
        return shapes


def _int(d, key, errors, where, default=None, minimum=None):
    v = d.get(key, default)
    if v is None:
        errors.append(f"{where}: missing '{key}'")
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        errors.append(f"{where}: '{key}' must be an integer, got {v!r}")
        return None
    if minimum is not None and v < minimum:
        errors.append(f"{where}: '{key}' must be >= {minimum}, got {v}")
        return None
    return v


def _parse_layer(i: int, raw: dict, errors: list) -> LayerSpec | None:
    where = f"layers[{i}]"
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected a table")
        return None
    kind = raw.get("kind")
    if not isinstance(kind, str):
        errors.append(f"{where}: missing 'kind'")
        return None
    kind = KIND_ALIASES.get(kind.lower(), kind.lower())
    if kind not in LAYER_KINDS:
        errors.append(f"operator unavailable: {raw['kind']}")
        return None
    name = raw.get("name") or f"{kind}{i}"
    where = f"layers[{i}] ({name})"
    attrs, formats = {}, {}
    if kind == "conv2d":
        attrs["out_channels"] = _int(raw, "out_channels", errors, where, minimum=1)
        attrs["kernel"] = _int(raw, "kernel", errors, where, minimum=1)
        attrs["stride"] = _int(raw, "stride", errors, where, default=1, minimum=1)
        attrs["padding"] = _int(raw, "padding", errors, where, default=0, minimum=0)
    elif kind == "fully_connected":
        attrs["out_features"] = _int(raw, "out_features", errors, where, minimum=1)
    elif kind == "maxpool":
        attrs["window"] = _int(raw, "window", errors, where, minimum=1)
        attrs["stride"] = _int(raw, "stride", errors, where, default=attrs["window"] or 1, minimum=1)
    activation = raw.get("activation")
    if activation not in (None, "relu", "none"):
        errors.append(f"operator unavailable: activation {activation}")
    if activation is not None and kind not in ("conv2d", "fully_connected"):
        errors.append(f"{where}: 'activation' only applies to conv2d/fully_connected")
    if kind in ("conv2d", "fully_connected"):
        for key in FORMAT_KEYS:
            v = raw.get(key, "auto")
            if v != "auto" and (isinstance(v, bool) or not isinstance(v, int)):
                errors.append(f"{where}: '{key}' must be \"auto\" or an integer")
            formats[key] = v
    known = {"kind", "name", "activation", *FORMAT_KEYS, *attrs}
    for key in raw:
        if key not in known:
            errors.append(f"{where}: unknown key '{key}'")
    return LayerSpec(kind, name, attrs, formats, None if activation == "none" else activation)


def infer_shapes(input_shape, layers) -> tuple[list, list]:
    shapes, errors = [], []
    shape = tuple(input_shape)
    for layer in layers:
        a = layer.attrs
        if None in a.values():
            return shapes, errors
        where = f"layer {layer.name}"
        if layer.kind == "conv2d":
            if len(shape) != 3:
                errors.append(f"{where}: conv2d needs an HWC input, got {shape}")
                return shapes, errors
            h, w, _ = shape
            k, s, p = a["kernel"], a["stride"], a["padding"]
            if h + 2 * p < k or w + 2 * p < k:
                errors.append(f"{where}: kernel {k} larger than padded input {shape}")
                return shapes, errors
            shape = ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1, a["out_channels"])
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                errors.append(f"{where}: maxpool needs an HWC input, got {shape}")
                return shapes, errors
            h, w, c = shape
            k, s = a["window"], a["stride"]
            if k > h or k > w:
                errors.append(f"{where}: pool window {k} larger than input {shape}")
                return shapes, errors
            shape = ((h - k) // s + 1, (w - k) // s + 1, c)
        elif layer.kind == "fully_connected":
            shape = (a["out_features"],)
        shapes.append(shape)
    return shapes, errors


def _check_combination(m) -> list[str]:
    errors = []
    if m.scheme not in SCHEMES:
        errors.append(f"unknown quantization scheme {m.scheme!r}")
    if m.preprocess not in PREPROCESS:
        errors.append(f"operator unavailable: preprocess {m.preprocess}")
    if m.scheme == "symmetric_pow2" and m.preprocess == "per_image_standardization":
        errors.append("per_image_standardization is input-dependent and has no symmetric int8 kernel")
    if m.input.dtype == "int8" and m.preprocess != "none":
        errors.append("int8 inputs are already quantized; use preprocess = \"none\"")
    if m.input.dtype == "uint8" and m.preprocess == "none" and m.scheme == "symmetric_pow2":
        errors.append("uint8 images need a preprocessing operator to reach int8")
    return errors


def parse_manifest(text: str) -> ModelManifest:
    """Parse and validate; raises ManifestError listing every problem found."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ManifestError([f"syntax error: {exc}"]) from exc
    errors: list[str] = []
    if doc.get("format") != MANIFEST_FORMAT:
        errors.append(f"missing header format = \"{MANIFEST_FORMAT}\"")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        errors.append(f"unsupported manifest version {version!r} (expected {MANIFEST_VERSION})")
    inp = doc.get("input")
    input_spec = None
    if not isinstance(inp, dict):
        errors.append("missing [input] table")
    else:
        shape = inp.get("shape")
        dtype = inp.get("dtype", "uint8")
        if not (isinstance(shape, list) and shape and all(isinstance(d, int) and d > 0 for d in shape)):
            errors.append("input.shape must be a list of positive integers")
            shape = None
        if dtype not in ("uint8", "int8"):
            errors.append(f"input.dtype must be uint8 or int8, got {dtype!r}")
        frac = inp.get("frac_bits")
        if dtype == "int8" and not isinstance(frac, int):
            errors.append("int8 input needs an integer input.frac_bits")
        if shape is not None:
            input_spec = InputSpec(tuple(shape), dtype, frac)
    raw_layers = doc.get("layers")
    layers = []
    if not isinstance(raw_layers, list) or not raw_layers:
        errors.append("layer list is empty")
    else:
        for i, raw in enumerate(raw_layers):
            layer = _parse_layer(i, raw, errors)
            if layer is not None:
                layers.append(layer)
        names = [layer.name for layer in layers]
        for dup in sorted({n for n in names if names.count(n) > 1}):
            errors.append(f"duplicate layer name {dup!r}")
    scheme = SCHEME_ALIASES.get(doc.get("scheme", "symmetric_pow2"), doc.get("scheme", "symmetric_pow2"))
    preprocess = doc.get("preprocess", "batch_norm_like")
    preprocess = PREPROCESS_ALIASES.get(preprocess, preprocess)
    pp = doc.get("preprocess_params")
    if pp is not None:
        if not isinstance(pp, dict) or not isinstance(pp.get("sigma_shift"), int) or not isinstance(pp.get("mu"), list):
            errors.append("preprocess_params needs integer 'sigma_shift' and list 'mu'")
    manifest = None
    if input_spec is not None:
        manifest = ModelManifest(
            str(doc.get("name", "model")), input_spec, tuple(layers), scheme, preprocess, pp,
            version if isinstance(version, int) else MANIFEST_VERSION,
        )
        errors.extend(_check_combination(manifest))
        if layers and len(layers) == len(raw_layers or []):
            _, shape_errors = infer_shapes(input_spec.shape, layers)
            errors.extend(shape_errors)
    if errors:
        raise ManifestError(errors)
    return manifest


def load_manifest(path) -> ModelManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def builtin_manifest(name: str) -> ModelManifest:
    path = Path(__file__).parent / "manifests" / f"{name}.toml"
    return load_manifest(path)


def cmsis_cifar10(channels=(32, 32, 64), scheme="symmetric_pow2", preprocess="batch_norm_like") -> ModelManifest:
    """The CMSIS-NN CIFAR-10 CNN: three 5x5 conv + relu + 2x2 pool stages and one FC layer."""
    c1, c2, c3 = channels
    layers = []
    for i, c in enumerate((c1, c2, c3), start=1):
        layers.append(LayerSpec("conv2d", f"conv{i}", {"out_channels": c, "kernel": 5, "stride": 1, "padding": 2},
                                {k: "auto" for k in FORMAT_KEYS}, "relu"))
        layers.append(LayerSpec("maxpool", f"pool{i}", {"window": 2, "stride": 2}))
    layers.append(LayerSpec("fully_connected", "fc1", {"out_features": 10}, {k: "auto" for k in FORMAT_KEYS}))
    return ModelManifest(f"cmsis_cifar10_{c1}_{c2}_{c3}", InputSpec((32, 32, 3)), tuple(layers),
                         SCHEME_ALIASES.get(scheme, scheme), PREPROCESS_ALIASES.get(preprocess, preprocess))
