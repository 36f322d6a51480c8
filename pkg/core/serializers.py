from rest_framework import serializers


class StrictSerializer(serializers.Serializer):
    """
    Plain serializer that rejects keys it does not declare, at every
    nesting level.
    """

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown field."] for key in unknown})
        return super().to_internal_value(data)
