from rest_framework import serializers

from core.serializers import StrictSerializer
from pipeline.presets import PRESETS
from pipeline.timing import ClientMode, TimingModel, UniformDist

MODE_CHOICES = [mode.value for mode in ClientMode]


class TimingModelSerializer(StrictSerializer):
    """
    Timing model in seconds. Either a full set of components or a `preset`
    name whose fields the remaining keys override.
    """

    preset = serializers.ChoiceField(choices=sorted(PRESETS), required=False)
    dt_ctrl = serializers.FloatField(min_value=1e-6, required=False)
    dt_vlm = serializers.FloatField(min_value=0.0, required=False)
    dt_ae = serializers.FloatField(min_value=0.0, required=False)
    N = serializers.IntegerField(min_value=1, max_value=1000, required=False)
    overhead = serializers.FloatField(min_value=0.0, required=False)
    packet_cost = serializers.FloatField(min_value=0.0, required=False)
    horizon = serializers.IntegerField(min_value=1, max_value=10000, required=False)
    alpha = serializers.FloatField(min_value=1e-6, max_value=1.0, required=False)
    u_d = serializers.FloatField(required=False)
    delay_pad = serializers.IntegerField(min_value=0, required=False)
    smin_pad = serializers.IntegerField(min_value=0, required=False)

    def validate_u_d(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("u_d must lie strictly between 0 and 1.")
        return value

    def to_timing(self, attrs):
        attrs = dict(attrs)
        preset = attrs.pop("preset", None)
        base = PRESETS[preset] if preset else TimingModel()
        return base.with_changes(**attrs)

    def validate(self, attrs):
        attrs["timing"] = self.to_timing(attrs)
        return attrs


class UniformDistSerializer(StrictSerializer):
    lo = serializers.FloatField()
    hi = serializers.FloatField()

    def validate(self, attrs):
        if attrs["lo"] > attrs["hi"]:
            raise serializers.ValidationError("lo must not exceed hi.")
        attrs["dist"] = UniformDist(attrs["lo"], attrs["hi"])
        return attrs


class LatencyRequestSerializer(StrictSerializer):
    timing = TimingModelSerializer()
    mode = serializers.ChoiceField(choices=MODE_CHOICES)


class ReactionRequestSerializer(StrictSerializer):
    timing = TimingModelSerializer()
    mode = serializers.ChoiceField(choices=MODE_CHOICES)
    s = serializers.IntegerField(min_value=1, required=False)


class DominanceRequestSerializer(StrictSerializer):
    a = UniformDistSerializer()
    b = UniformDistSerializer()


class CompareRequestSerializer(StrictSerializer):
    timing = TimingModelSerializer()
    name = serializers.CharField(max_length=64, required=False, default="timing")
    modes = serializers.ListField(
        child=serializers.ChoiceField(choices=MODE_CHOICES), required=False, allow_empty=False
    )
