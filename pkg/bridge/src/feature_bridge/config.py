"""Bridge configuration."""

from dataclasses import dataclass

from feature_bridge.backbone import Backbone
from feature_bridge.errors import BridgeError


@dataclass(frozen=True)
class BridgeConfig:
    """Backbone, endpoint, and output settings for the bridge commands."""

    source_backbone: str = "patchstats16-64"
    target_backbone: str = "patchstats16-48"
    image_size: int = 512
    endpoint_url: str | None = None
    api_key_env: str = "BRIDGE_API_KEY"
    output_dir: str = "."

    def __post_init__(self):
        if self.image_size < 1:
            raise BridgeError(f"image_size must be positive, got {self.image_size}")
        for name in (self.source_backbone, self.target_backbone):
            backbone = Backbone(name)
            if self.image_size % backbone.patch_size != 0:
                raise BridgeError(
                    f"image_size {self.image_size} is not divisible by the "
                    f"{name} patch size {backbone.patch_size}"
                )

    def backbone_for(self, space):
        if space == "source":
            return Backbone(self.source_backbone)
        if space == "target":
            return Backbone(self.target_backbone)
        raise BridgeError(f"space must be 'source' or 'target', got {space!r}")
