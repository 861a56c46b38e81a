"""Flow-guided warping of intermediate CNN representations for video
segmentation: a tape-based tensor core, the differentiable warp module,
a small host segmentation network, synthetic video data, and the IoU /
trimap-IoU / iIoU evaluation protocol."""

from .tensor import Tape, Tensor
from .warp import WarpConfig, subsample_flow, warp
from .assembly import NetWarpSpec, netwarp_apply, two_frame_forward, video_inference
from .segnet import SegNet, SegNetConfig

__all__ = [
    "Tape", "Tensor", "WarpConfig", "subsample_flow", "warp",
    "NetWarpSpec", "netwarp_apply", "two_frame_forward", "video_inference",
    "SegNet", "SegNetConfig",
]
