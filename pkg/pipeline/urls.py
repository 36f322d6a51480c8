from django.urls import path

from .views import CompareView, DominanceView, LatencyView, ReactionView

urlpatterns = [
    path("pipeline/latency/", LatencyView.as_view(), name="pipeline-latency"),
    path("pipeline/reaction/", ReactionView.as_view(), name="pipeline-reaction"),
    path("pipeline/dominance/", DominanceView.as_view(), name="pipeline-dominance"),
    path("pipeline/compare/", CompareView.as_view(), name="pipeline-compare"),
]
