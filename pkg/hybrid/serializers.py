"""
Serializers for the structured files the commands read and write.
"""
from typing import Dict, List

from rest_framework import serializers

from hybrid.services.cost_model import ProfileSet, energy_consistent, profiles_from_dict
from hybrid.services.exceptions import ConfigurationError, HybridError
from hybrid.services.model_factory import MODEL_NAMES, HybridModelSpec
from hybrid.services.trainer import OPTIMIZERS, TrainConfig


def _missing_fields(errors: Dict, prefix: str = '') -> List[str]:
    """Dotted names of every field DRF reported as required."""
    missing = []
    for name, detail in errors.items():
        path = f"{prefix}{name}"
        if isinstance(detail, dict):
            missing.extend(_missing_fields(detail, f"{path}."))
        elif any(getattr(error, 'code', None) == 'required' for error in detail):
            missing.append(path)
    return missing


def _shape_field(length: int, **kwargs) -> serializers.ListField:
    return serializers.ListField(child=serializers.IntegerField(min_value=1),
                                 min_length=length, max_length=length, **kwargs)


class ModelSpecSerializer(serializers.Serializer):
    """Model spec file: model, interval, input_shape, channel_schedule, classes."""
    model = serializers.ChoiceField(choices=MODEL_NAMES)
    interval = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    input_shape = _shape_field(4, required=False)
    channel_schedule = _shape_field(5, required=False)
    dense_schedule = _shape_field(2, required=False)
    classes = serializers.IntegerField(min_value=2, required=False)
    pad_final_group = serializers.BooleanField(required=False)

    def validate(self, attrs):
        try:
            self.spec_from(attrs)
        except HybridError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs

    @staticmethod
    def spec_from(attrs: Dict) -> HybridModelSpec:
        values = dict(attrs)
        if 'classes' in values:
            values['class_count'] = values.pop('classes')
        return HybridModelSpec.from_dict(values)

    def to_spec(self) -> HybridModelSpec:
        return self.spec_from(self.validated_data)


class TrainConfigSerializer(serializers.Serializer):
    epochs = serializers.IntegerField(min_value=0, required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    learning_rate = serializers.FloatField(min_value=0.0, required=False)
    beta1 = serializers.FloatField(min_value=0.0, max_value=0.999999, required=False)
    beta2 = serializers.FloatField(min_value=0.0, max_value=0.999999, required=False)
    eps = serializers.FloatField(required=False)
    clip_norm = serializers.FloatField(min_value=0.0, required=False)
    optimizer = serializers.ChoiceField(choices=OPTIMIZERS, required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    num_threads = serializers.IntegerField(min_value=1, required=False)
    relaxed = serializers.BooleanField(required=False)

    def to_config(self) -> TrainConfig:
        return TrainConfig.from_settings(**self.validated_data)


class NeuromorphicProfileSerializer(serializers.Serializer):
    name = serializers.CharField()
    neurons_per_core = serializers.IntegerField(min_value=1)
    cores_per_chip = serializers.IntegerField(min_value=1)
    synapses_per_chip = serializers.FloatField(min_value=0.0)
    energy_per_synaptic_event = serializers.FloatField(min_value=0.0)
    core_overhead_energy = serializers.FloatField(min_value=0.0)
    timestep_latency = serializers.FloatField(min_value=0.0)
    core_latency = serializers.FloatField(min_value=0.0)


class EdgeProfileSerializer(serializers.Serializer):
    name = serializers.CharField()
    energy_per_mac = serializers.FloatField(min_value=0.0)
    energy_per_parameter = serializers.FloatField(min_value=0.0)
    layer_overhead_energy = serializers.FloatField(min_value=0.0)
    layer_overhead_latency = serializers.FloatField(min_value=0.0)
    idle_power = serializers.FloatField(min_value=0.0)
    clock_hz = serializers.FloatField(min_value=1.0)
    mac_units = serializers.IntegerField(min_value=1)
    memory_bandwidth = serializers.FloatField(min_value=1.0)
    bytes_per_parameter = serializers.IntegerField(min_value=1)


class AccumulatorProfileSerializer(serializers.Serializer):
    name = serializers.CharField()
    clock_hz = serializers.FloatField(min_value=1.0)
    energy_per_tick = serializers.FloatField(min_value=0.0)
    energy_per_latch_bit = serializers.FloatField(min_value=0.0)
    bank_size = serializers.IntegerField(min_value=1)
    bank_count = serializers.IntegerField(min_value=1)


class LinkProfileSerializer(serializers.Serializer):
    name = serializers.CharField(required=False)
    energy_per_byte = serializers.FloatField(min_value=0.0, required=False)
    latency_per_byte = serializers.FloatField(min_value=0.0, required=False)


class ProfileSetSerializer(serializers.Serializer):
    """Device profile file; values are calibration constants, not measurements."""
    _provenance = serializers.CharField(required=False, allow_blank=True)
    neuromorphic = NeuromorphicProfileSerializer()
    edge = EdgeProfileSerializer()
    accumulator = AccumulatorProfileSerializer()
    link = LinkProfileSerializer(required=False)

    @classmethod
    def load(cls, data: Dict) -> ProfileSet:
        serializer = cls(data=data)
        if not serializer.is_valid():
            missing = _missing_fields(serializer.errors)
            raise ConfigurationError(f"invalid device profile: {dict(serializer.errors)}",
                                     missing_fields=missing)
        return profiles_from_dict(serializer.validated_data)


class CostRecordSerializer(serializers.Serializer):
    """One component/total line of a cost report."""
    model = serializers.ChoiceField(choices=MODEL_NAMES)
    interval = serializers.IntegerField(allow_null=True)
    timesteps = serializers.IntegerField(min_value=1)
    record = serializers.ChoiceField(choices=['component', 'total'])
    component = serializers.CharField()
    latency_s = serializers.FloatField(min_value=0.0)
    power_w = serializers.FloatField(min_value=0.0)
    energy_j = serializers.FloatField(min_value=0.0)

    def validate(self, attrs):
        if not energy_consistent(attrs):
            raise serializers.ValidationError(
                f"{attrs['component']}: energy {attrs['energy_j']} != power × latency"
            )
        return attrs


class RunManifestSerializer(serializers.Serializer):
    command = serializers.CharField()
    config = serializers.DictField()
    seed = serializers.IntegerField(allow_null=True)
    artifacts = serializers.DictField(child=serializers.CharField())
    started_at = serializers.DateTimeField()
    finished_at = serializers.DateTimeField()
    exit_code = serializers.IntegerField()
