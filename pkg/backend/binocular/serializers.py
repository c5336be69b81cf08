from pathlib import Path
from typing import Any

from rest_framework import serializers
from rest_framework.exceptions import ValidationError

from .domain import (
    FULL_CHANNELS,
    TRAIN_MODES,
    BackboneConfig,
    ElasticConfig,
    EpisodeSpec,
    EvalSettings,
    LossWeights,
    RunConfig,
    TrainConfig,
)
from .services.datasets import SYNTHETIC_SCHEME
from .services.degradations import PRESETS
from .services.schedules import step_schedule


class EpisodeSpecSerializer(serializers.Serializer):
    n_way = serializers.IntegerField(min_value=1)
    k_shot = serializers.IntegerField(min_value=1)
    q_query = serializers.IntegerField(min_value=1)

    @staticmethod
    def build(data: dict[str, Any]) -> EpisodeSpec:
        return EpisodeSpec(data["n_way"], data["k_shot"], data["q_query"])


class BackboneSerializer(serializers.Serializer):
    block_channels = serializers.ListField(
        child=serializers.IntegerField(min_value=1),
        min_length=4,
        max_length=4,
        default=list(FULL_CHANNELS),
    )
    shared_depth = serializers.IntegerField(min_value=0, max_value=4, default=3)
    input_size = serializers.IntegerField(min_value=16, default=84)
    desk_scale = serializers.BooleanField(default=False)
    dropblock_enabled = serializers.BooleanField(default=False)
    dropblock_size = serializers.IntegerField(min_value=1, default=5)
    drop_rate = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)


class TrainSerializer(serializers.Serializer):
    epochs = serializers.IntegerField(min_value=1)
    lr_schedule = serializers.JSONField()
    momentum = serializers.FloatField(min_value=0.0, max_value=1.0)
    weight_decay = serializers.FloatField(min_value=0.0)
    nesterov = serializers.BooleanField()
    episodes_per_epoch = serializers.IntegerField(min_value=1, allow_null=True)
    augment = serializers.BooleanField()
    save_every = serializers.IntegerField(min_value=0)
    train_spec = EpisodeSpecSerializer()
    val_spec = EpisodeSpecSerializer()
    val_episodes = serializers.IntegerField(min_value=1)

    def validate_lr_schedule(self, value: Any) -> Any:
        """
        Either an explicit list of [epoch, lr] pairs or a step decay
        {base_lr, step, gamma}, expanded over the configured epochs in validate().
        """
        if isinstance(value, dict):
            unknown = set(value) - {"base_lr", "step", "gamma"}
            if unknown:
                raise ValidationError(f"Unknown step-schedule keys: {sorted(unknown)}")
            try:
                step = {
                    "base_lr": float(value.get("base_lr", 0.1)),
                    "step": int(value.get("step", 40)),
                    "gamma": float(value.get("gamma", 0.1)),
                }
            except (TypeError, ValueError) as e:
                raise ValidationError(f"Bad step schedule: {e}") from e
            if step["base_lr"] <= 0 or step["step"] < 1 or not 0 < step["gamma"] <= 1:
                raise ValidationError("Step schedule needs base_lr > 0, step >= 1, 0 < gamma <= 1")
            return step
        if not isinstance(value, list) or not value:
            raise ValidationError("lr_schedule must be a list of [epoch, lr] pairs or a step dict")
        schedule = []
        for entry in value:
            if not isinstance(entry, (list, tuple)) or len(entry) != 2:
                raise ValidationError(f"Schedule entry {entry!r} is not an [epoch, lr] pair")
            epoch, lr = entry
            if not isinstance(epoch, int) or epoch < 0:
                raise ValidationError(f"Schedule epoch {epoch!r} must be a non-negative integer")
            if not isinstance(lr, (int, float)) or lr <= 0:
                raise ValidationError(f"Learning rate {lr!r} must be positive")
            schedule.append((epoch, float(lr)))
        epochs = [e for e, _ in schedule]
        if epochs[0] != 0 or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValidationError("Schedule epochs must start at 0 and strictly increase")
        return tuple(schedule)

    def validate(self, attrs: dict[str, Any]) -> dict[str, Any]:
        schedule = attrs["lr_schedule"]
        if isinstance(schedule, dict):
            attrs["lr_schedule"] = step_schedule(epochs=attrs["epochs"], **schedule)
        return attrs


class LossWeightsSerializer(serializers.Serializer):
    alpha = serializers.FloatField(min_value=0.0)
    beta = serializers.FloatField(min_value=0.0)
    gamma = serializers.FloatField(min_value=0.0)


class ElasticSerializer(serializers.Serializer):
    enabled = serializers.BooleanField()
    alpha1 = serializers.FloatField(min_value=4.0, max_value=6.0)
    alpha2 = serializers.FloatField(min_value=0.05, max_value=0.25)


class LossesSerializer(serializers.Serializer):
    weights = LossWeightsSerializer()
    elastic = ElasticSerializer()
    squared_distance = serializers.BooleanField()
    mutual_temperature = serializers.FloatField(min_value=1e-6)


class EvaluationSerializer(serializers.Serializer):
    specs = EpisodeSpecSerializer(many=True)
    n_episodes = serializers.IntegerField(min_value=1)
    fusion = serializers.ChoiceField(choices=["sum", "softmax"])
    degradations = serializers.ListField(
        child=serializers.ChoiceField(choices=sorted(PRESETS)), allow_empty=True
    )

    def validate_specs(self, value: list[dict[str, int]]) -> list[dict[str, int]]:
        if not value:
            raise ValidationError("At least one evaluation spec is required")
        return value


class RunConfigSerializer(serializers.Serializer):
    name = serializers.RegexField(r"^[A-Za-z0-9_.-]+$", max_length=128)
    source = serializers.CharField()
    manifest = serializers.CharField(allow_null=True)
    output_dir = serializers.CharField(allow_null=True)
    seed = serializers.IntegerField(min_value=0)
    mode = serializers.ChoiceField(choices=list(TRAIN_MODES))
    model = BackboneSerializer()
    train = TrainSerializer()
    losses = LossesSerializer()
    evaluation = EvaluationSerializer()

    def validate_source(self, value: str) -> str:
        if not value.startswith(SYNTHETIC_SCHEME) and not Path(value).is_dir():
            raise ValidationError(f"Dataset path {value} does not exist")
        return value

    def validate_manifest(self, value: str | None) -> str | None:
        if value is not None and not Path(value).is_file():
            raise ValidationError(f"Split manifest {value} does not exist")
        return value

    def validate(self, attrs: dict[str, Any]) -> dict[str, Any]:
        model = attrs["model"]
        if model["desk_scale"] and model["input_size"] > 64:
            raise ValidationError({"model": "desk_scale expects small inputs (<= 64 px)"})
        return attrs

    @staticmethod
    def build(data: dict[str, Any], document: dict[str, Any]) -> RunConfig:
        seed = data["seed"]
        model = BackboneConfig(
            block_channels=tuple(data["model"]["block_channels"]),
            shared_depth=data["model"]["shared_depth"],
            input_size=data["model"]["input_size"],
            dropblock_enabled=data["model"]["dropblock_enabled"],
            desk_scale=data["model"]["desk_scale"],
            dropblock_size=data["model"]["dropblock_size"],
            drop_rate=data["model"]["drop_rate"],
            seed=seed,
        )
        train, losses = data["train"], data["losses"]
        elastic = losses["elastic"]
        train_config = TrainConfig(
            epochs=train["epochs"],
            lr_schedule=train["lr_schedule"],
            momentum=train["momentum"],
            weight_decay=train["weight_decay"],
            nesterov=train["nesterov"],
            train_spec=EpisodeSpecSerializer.build(train["train_spec"]),
            weights=LossWeights(**losses["weights"]),
            elastic=ElasticConfig(
                alpha1=elastic["alpha1"],
                alpha2=elastic["alpha2"],
                epoch=0,
                total_epochs=train["epochs"],
                enabled=elastic["enabled"],
            ),
            mode=data["mode"],
            seed=seed,
            episodes_per_epoch=train["episodes_per_epoch"],
            augment=train["augment"],
            squared_distance=losses["squared_distance"],
            mutual_temperature=losses["mutual_temperature"],
            val_spec=EpisodeSpecSerializer.build(train["val_spec"]),
            val_episodes=train["val_episodes"],
            save_every=train["save_every"],
        )
        evaluation = data["evaluation"]
        return RunConfig(
            name=data["name"],
            source=data["source"],
            model=model,
            train=train_config,
            evaluation=EvalSettings(
                specs=tuple(EpisodeSpecSerializer.build(s) for s in evaluation["specs"]),
                n_episodes=evaluation["n_episodes"],
                fusion=evaluation["fusion"],
                degradations=tuple(evaluation["degradations"]),
            ),
            manifest=data["manifest"],
            output_dir=Path(data["output_dir"]) if data["output_dir"] else None,
            seed=seed,
            document=document,
        )
