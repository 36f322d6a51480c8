from rest_framework import serializers

from core.serializers import StrictSerializer
from pipeline.serializers import TimingModelSerializer
from pipeline.timing import ClientMode
from wire.protocol import ServerMode


class EnvSectionSerializer(StrictSerializer):
    num_episodes = serializers.IntegerField(min_value=1)
    episode_len = serializers.IntegerField(min_value=1)
    H = serializers.IntegerField(min_value=2, max_value=1000)
    jump_rate = serializers.FloatField(min_value=0.0, max_value=1.0)
    gain = serializers.FloatField(min_value=0.0)
    v_max = serializers.FloatField(min_value=1e-6)
    dt = serializers.FloatField(min_value=1e-6)


class TrainSectionSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=1)
    batch_size = serializers.IntegerField(min_value=1)
    p = serializers.FloatField(min_value=0.0, max_value=1.0)
    d_max = serializers.IntegerField(min_value=0)
    lr = serializers.FloatField(min_value=0.0)
    betas = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=0.999999), min_length=2, max_length=2)
    eps = serializers.FloatField(min_value=0.0)
    weight_decay = serializers.FloatField(min_value=0.0)
    grad_clip = serializers.FloatField(min_value=0.0)
    hidden = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=False)
    warmup_steps = serializers.IntegerField(min_value=0)
    lr_schedule = serializers.ChoiceField(choices=["constant", "cosine"])
    holdout_fraction = serializers.FloatField(min_value=0.0, max_value=0.9)
    loss_ratio_target = serializers.FloatField(min_value=1.0)


class ScheduleSectionSerializer(StrictSerializer):
    N = serializers.IntegerField(min_value=1, max_value=255)
    alpha = serializers.FloatField(min_value=1e-6, max_value=1.0)
    u_d = serializers.FloatField()

    def validate_u_d(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("u_d must lie strictly between 0 and 1.")
        return value


class WireSectionSerializer(StrictSerializer):
    host = serializers.CharField(max_length=255)
    port = serializers.IntegerField(min_value=0, max_value=65535)
    server_mode = serializers.ChoiceField(choices=[m.name.lower() for m in ServerMode])
    client_mode = serializers.ChoiceField(choices=[m.value for m in ClientMode])
    duration = serializers.FloatField(min_value=0.1)
    emulate = serializers.BooleanField()
    guard = serializers.FloatField(min_value=0.0, max_value=1.0)


class RunConfigSerializer(StrictSerializer):
    """Whole run configuration; every section is required after merging with the defaults."""

    seed = serializers.IntegerField(min_value=0)
    env = EnvSectionSerializer()
    train = TrainSectionSerializer()
    schedule = ScheduleSectionSerializer()
    timing = TimingModelSerializer()
    wire = WireSectionSerializer()

    def validate(self, attrs):
        H = attrs["env"]["H"]
        if attrs["train"]["d_max"] >= H:
            raise serializers.ValidationError({"train": {"d_max": [f"d_max must be below env.H={H}."]}})
        timing = attrs["timing"]["timing"]
        if "horizon" in attrs["timing"] and timing.horizon != H:
            raise serializers.ValidationError(
                {"timing": {"horizon": [f"timing horizon {timing.horizon} differs from env.H={H}."]}}
            )
        schedule = attrs["schedule"]
        attrs["timing"]["timing"] = timing.with_changes(
            horizon=H, N=schedule["N"], alpha=schedule["alpha"], u_d=schedule["u_d"]
        )
        return attrs
