//! Reference architectures.

use crate::net3d::TwoBranchSpec;
use crate::space::{LayerSpec, ModelSpec};

/// MobileNetV1 at 224×224 with the 1000-way ImageNet classifier.
pub fn mobilenet_v1() -> ModelSpec {
    let mut layers = vec![LayerSpec::conv2d(3, 3, 32, 112).fixed_input()];
    let blocks = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let (mut c, mut hw) = (32, 112);
    for (co, stride) in blocks {
        hw /= stride;
        layers.push(LayerSpec::depthwise(3, c, hw));
        layers.push(LayerSpec::conv2d(1, c, co, hw));
        c = co;
    }
    layers.push(LayerSpec::linear(1024, 1000).fixed_output());
    ModelSpec {
        name: "mobilenet_v1".into(),
        layers,
        base_resolution: 224,
        base_frames: 1,
        width_bounds: [0.25, 1.0],
        channel_divisor: 8,
    }
}

/// Small six-layer ConvNet for 32×32 inputs (≈0.29M parameters).
pub fn cifar_convnet() -> ModelSpec {
    ModelSpec {
        name: "cifar_convnet".into(),
        layers: vec![
            LayerSpec::conv2d(3, 3, 32, 32).fixed_input(),
            LayerSpec::conv2d(3, 32, 32, 32),
            LayerSpec::conv2d(3, 32, 64, 16),
            LayerSpec::conv2d(3, 64, 64, 16),
            LayerSpec::conv2d(3, 64, 128, 8),
            LayerSpec::conv2d(3, 128, 128, 8),
            LayerSpec::linear(128, 10).fixed_output(),
        ],
        base_resolution: 32,
        base_frames: 1,
        width_bounds: [0.5, 1.0],
        channel_divisor: 4,
    }
}

/// Four-stage residual 3D network over 8-frame 32×32 clips.
pub fn tiny_slow3d() -> ModelSpec {
    ModelSpec {
        name: "tiny_slow3d".into(),
        layers: vec![
            LayerSpec::conv3d(3, 1, 3, 8, 16, 8).fixed_input(),
            LayerSpec::conv3d(3, 3, 8, 8, 16, 8).with_residual(),
            LayerSpec::conv3d(3, 3, 8, 16, 8, 8),
            LayerSpec::conv3d(3, 3, 16, 16, 8, 8).with_residual(),
            LayerSpec::conv3d(3, 3, 16, 32, 4, 4),
            LayerSpec::conv3d(3, 3, 32, 32, 4, 4).with_residual(),
            LayerSpec::conv3d(3, 3, 32, 32, 2, 4),
            LayerSpec::conv3d(3, 3, 32, 32, 2, 4).with_residual(),
            LayerSpec::linear(32, 10).fixed_output(),
        ],
        base_resolution: 32,
        base_frames: 8,
        width_bounds: [0.5, 1.0],
        channel_divisor: 4,
    }
}

/// [`tiny_slow3d`] as the Slow pathway of a two-pathway network with a
/// 32-frame Fast pathway (α = 4, β = 1/8) fused after layers 3 and 5.
pub fn tiny_slowfast() -> TwoBranchSpec {
    let fast = ModelSpec {
        name: "tiny_fast3d".into(),
        layers: vec![
            LayerSpec::conv3d(3, 3, 3, 1, 16, 32).fixed_input(),
            LayerSpec::conv3d(3, 3, 1, 1, 16, 32).with_residual(),
            LayerSpec::conv3d(3, 3, 1, 2, 8, 32),
            LayerSpec::conv3d(3, 3, 2, 2, 8, 32).with_residual(),
            LayerSpec::conv3d(3, 3, 2, 4, 4, 16),
            LayerSpec::conv3d(3, 3, 4, 4, 4, 16).with_residual(),
        ],
        base_resolution: 32,
        base_frames: 32,
        width_bounds: [1.0, 1.0],
        channel_divisor: 1,
    };
    TwoBranchSpec {
        slow: tiny_slow3d(),
        fast,
        alpha: 4,
        beta: 0.125,
        fusion_points: vec![3, 5],
    }
}
