from django.conf import settings
from rest_framework import serializers
from rest_framework.renderers import JSONRenderer

from .gan import parse_discriminator_dims
from .models import (
    AggregationWeighting, DatasetPreset, EpsilonMode, GenerationMode, LossForm, PartitionMode, SweepAxis,
)

CONFIG_VERSION = 1


class ExperimentConfigSerializer(serializers.Serializer):
    """
    Validates an experiment configuration. Keys a preset provides act as
    defaults under the explicit keys; unknown keys are rejected.
    """
    version = serializers.IntegerField()
    preset = serializers.ChoiceField(choices=DatasetPreset.choices, allow_null=True, default=None)

    dataset = serializers.CharField()
    column = serializers.CharField(allow_null=True, default=None)
    n_max = serializers.IntegerField(default=10, min_value=1, max_value=12)
    require_connected = serializers.BooleanField(default=True)
    split_ratios = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), min_length=3, max_length=3, default=lambda: [0.8, 0.1, 0.1],
    )

    generator_dims = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=1, default=lambda: [32, 128],
    )
    discriminator_dims = serializers.CharField(default='[32,64],32,[64,1]')
    dropout_gen = serializers.FloatField(default=0.0, min_value=0.0)
    dropout_disc = serializers.FloatField(default=0.0, min_value=0.0)

    num_clients = serializers.IntegerField(default=4, min_value=1)
    partition = serializers.ChoiceField(choices=PartitionMode.choices, default=PartitionMode.IID)
    alpha = serializers.FloatField(default=0.5)
    aggregation = serializers.ChoiceField(choices=AggregationWeighting.choices, default=AggregationWeighting.SAMPLES)
    epochs_per_round = serializers.IntegerField(default=1000, min_value=1)
    batch_size = serializers.IntegerField(default=16, min_value=1)
    rounds = serializers.IntegerField(default=100, min_value=0)

    gamma = serializers.FloatField(default=10.0, min_value=0.0)
    epsilon_mode = serializers.ChoiceField(choices=EpsilonMode.choices, default=EpsilonMode.UNIFORM)
    epsilon = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0)
    loss_form = serializers.ChoiceField(choices=LossForm.choices, default=LossForm.WGAN)
    lr = serializers.FloatField(default=1e-4)
    beta1 = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0)
    beta2 = serializers.FloatField(default=0.999, min_value=0.0, max_value=1.0)
    lr_decay_interval = serializers.IntegerField(default=1000, min_value=0)
    lr_decay_factor = serializers.FloatField(default=100.0)
    temperature = serializers.FloatField(default=1.0)
    noise_resample_interval = serializers.IntegerField(default=0, min_value=0)

    seed = serializers.IntegerField(default=0, min_value=0)
    deterministic = serializers.BooleanField(default=False)
    workers = serializers.IntegerField(default=lambda: settings.MOLFED_WORKERS, min_value=1)

    eval_interval = serializers.IntegerField(default=0, min_value=0)
    eval_samples = serializers.IntegerField(default=256, min_value=0)
    sample_mode = serializers.ChoiceField(
        choices=[GenerationMode.HARD, GenerationMode.CATEGORICAL], default=GenerationMode.HARD,
    )
    snn_sample_size = serializers.IntegerField(default=1000, min_value=1)
    fingerprint_bits = serializers.IntegerField(default=2048, min_value=8)
    fingerprint_radius = serializers.IntegerField(default=2, min_value=0)
    logp_bounds = serializers.ListField(
        child=serializers.FloatField(), min_length=2, max_length=2, default=lambda: [-2.12, 6.26],
    )
    checkpoint_interval = serializers.IntegerField(default=0, min_value=0)
    plateau_window = serializers.IntegerField(default=10, min_value=1)
    plateau_threshold = serializers.FloatField(default=0.05, min_value=0.0)
    stop_on_plateau = serializers.BooleanField(default=False)
    output_dir = serializers.CharField(allow_null=True, default=None)
    sweep = serializers.DictField(
        child=serializers.ListField(child=serializers.JSONField(), min_length=1), allow_null=True, default=None,
    )

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            raise serializers.ValidationError({'non_field_errors': ["Configuration must be a JSON object."]})

        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({key: ["Unknown configuration key."] for key in unknown})

        preset = data.get('preset')
        if preset is not None:
            if preset not in settings.SIMULATION_PRESETS:
                raise serializers.ValidationError({'preset': [f"Unknown preset '{preset}'."]})
            data = {**settings.SIMULATION_PRESETS[preset], **data}
        return super().to_internal_value(data)

    def validate_version(self, value):
        if value != CONFIG_VERSION:
            raise serializers.ValidationError(f"Unsupported configuration version {value}; expected {CONFIG_VERSION}.")
        return value

    def validate_discriminator_dims(self, value):
        try:
            parse_discriminator_dims(value)
        except ValueError as e:
            raise serializers.ValidationError(str(e))
        return value.replace(' ', '')

    def validate_split_ratios(self, value):
        if abs(sum(value) - 1.0) > 1e-9:
            raise serializers.ValidationError("Split ratios must sum to 1.")
        return value

    def validate_logp_bounds(self, value):
        if value[0] >= value[1]:
            raise serializers.ValidationError("Lower LogP bound must be below the upper bound.")
        return value

    def validate_sweep(self, value):
        if value is None:
            return value
        for axis, points in value.items():
            if axis not in SweepAxis.values:
                raise serializers.ValidationError(f"Unknown sweep axis '{axis}'.")
            for point in points:
                self._validate_sweep_point(axis, point)
        return value

    def _validate_sweep_point(self, axis, point):
        if axis == SweepAxis.DISCRIMINATOR_DIMS:
            self.validate_discriminator_dims(str(point))
        elif axis == SweepAxis.NUM_CLIENTS:
            if not isinstance(point, int) or isinstance(point, bool) or point < 1:
                raise serializers.ValidationError(f"Client counts must be positive integers, got {point!r}.")
        elif not isinstance(point, (int, float)) or isinstance(point, bool) or not 0.0 <= point < 1.0:
            raise serializers.ValidationError(f"Dropout ratios must be in [0, 1), got {point!r}.")

    def validate(self, data):
        errors = {}
        for key in ('alpha', 'lr', 'lr_decay_factor', 'temperature'):
            if data[key] <= 0:
                errors[key] = ["Must be greater than 0."]
        for key in ('dropout_gen', 'dropout_disc'):
            if data[key] >= 1.0:
                errors[key] = ["Must be below 1."]
        if errors:
            raise serializers.ValidationError(errors)
        return data


class MetricsReportSerializer(serializers.Serializer):
    validity = serializers.FloatField()
    uniqueness = serializers.FloatField()
    novelty = serializers.FloatField()
    int_div_1 = serializers.FloatField()
    int_div_2 = serializers.FloatField()
    snn = serializers.FloatField()
    logp_normalized = serializers.FloatField()
    qed = serializers.FloatField(allow_null=True)
    all_pad_fraction = serializers.FloatField()
    n_generated = serializers.IntegerField()
    n_valid = serializers.IntegerField()
    asim = serializers.FloatField()
    warnings = serializers.ListField(child=serializers.CharField())


class RunReportSerializer(serializers.Serializer):
    """A metrics report together with the run settings it belongs to."""
    dataset = serializers.CharField()
    generator_dims = serializers.ListField(child=serializers.IntegerField())
    discriminator_dims = serializers.CharField()
    num_clients = serializers.IntegerField()
    dropout_gen = serializers.FloatField()
    dropout_disc = serializers.FloatField()
    seed = serializers.IntegerField()
    round = serializers.IntegerField()
    skipped_records = serializers.IntegerField()
    metrics = MetricsReportSerializer(allow_null=True)


class ClientLossSerializer(serializers.Serializer):
    client = serializers.IntegerField()
    samples = serializers.IntegerField()
    generator = serializers.FloatField()
    discriminator = serializers.FloatField()
    penalty = serializers.FloatField()


class RoundRecordSerializer(serializers.Serializer):
    round = serializers.IntegerField()
    client_losses = ClientLossSerializer(many=True)
    global_gen_loss = serializers.FloatField()
    global_disc_loss = serializers.FloatField()
    wall_ms = serializers.FloatField()


def render_json(data, indent=None):
    """Render serializer data as UTF-8 JSON bytes."""
    return JSONRenderer().render(data, renderer_context={'indent': indent})
