import logging

from rest_framework.permissions import AllowAny
from rest_framework.views import APIView

from core.utils.response_models import SuccessResponse
from pipeline.report import DEFAULT_MODES, compare_modes
from pipeline.serializers import (
    CompareRequestSerializer,
    DominanceRequestSerializer,
    LatencyRequestSerializer,
    ReactionRequestSerializer,
)
from pipeline.timing import (
    ClientMode,
    delay_and_smin,
    dominance_probability,
    infer_latency,
    reaction_distribution,
    stream_timeline,
)

logger = logging.getLogger(__name__)


def _ms(seconds):
    return round(seconds * 1000.0, 4)


class LatencyView(APIView):
    """
    POST /pipeline/latency/ - latency, discretized delay and s_min of one mode
    """

    permission_classes = [AllowAny]

    def post(self, request):
        serializer = LatencyRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        timing = serializer.validated_data["timing"]["timing"]
        mode = ClientMode(serializer.validated_data["mode"])
        d, s_min = delay_and_smin(timing, mode)
        return SuccessResponse(
            {"mode": mode.value, "latency_ms": _ms(infer_latency(timing, mode)), "d": d, "s_min": s_min}
        )


class ReactionView(APIView):
    """
    POST /pipeline/reaction/ - uniform reaction-time distribution of one mode
    """

    permission_classes = [AllowAny]

    def post(self, request):
        serializer = ReactionRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        data = serializer.validated_data
        mode = ClientMode(data["mode"])
        dist = reaction_distribution(data["timing"]["timing"], mode, data.get("s"))
        return SuccessResponse(
            {"mode": mode.value, "lo_ms": _ms(dist.lo), "hi_ms": _ms(dist.hi), "mean_ms": _ms(dist.mean)}
        )


class DominanceView(APIView):
    """
    POST /pipeline/dominance/ - P(X < Y) for two uniform reaction distributions
    """

    permission_classes = [AllowAny]

    def post(self, request):
        serializer = DominanceRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        a = serializer.validated_data["a"]["dist"]
        b = serializer.validated_data["b"]["dist"]
        return SuccessResponse({"p": dominance_probability(a, b)})


class CompareView(APIView):
    """
    POST /pipeline/compare/ - full comparison table, dominance matrix, speedups
    and the streamed-packet timeline
    """

    permission_classes = [AllowAny]

    def post(self, request):
        serializer = CompareRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        data = serializer.validated_data
        timing = data["timing"]["timing"]
        comparison = compare_modes(timing, data["name"], data.get("modes") or DEFAULT_MODES)
        timeline = []
        if ClientMode.FASTER in comparison.summaries:
            timeline = [
                {"index": p.index, "required_ms": _ms(p.required), "received_ms": _ms(p.received)}
                for p in stream_timeline(timing, comparison.summaries[ClientMode.FASTER].s)
            ]
        logger.debug("compare request for %s", comparison.name)
        return SuccessResponse(
            {
                "name": comparison.name,
                "table": comparison.table_rows(),
                "dominance": comparison.matrix_rows(),
                "speedups": comparison.speedups(),
                "timeline": timeline,
            }
        )
