//! Fixtures shared by the benchmarks.

use illumnerf::intrinsic::{PseudoAlbedoMap, ProviderKind};
use illumnerf::io::RunConfig;
use illumnerf::synth::{two_planes, TwoPlanesConfig};
use illumnerf::trainer::{TrainData, Trainer};
use illumnerf::Result;

/// Two-planes train views at `size`×`size` with ground-truth pseudo-albedo.
pub fn two_planes_data(size: usize) -> Result<TrainData> {
    let scene = two_planes(&TwoPlanesConfig {
        train_views: 3,
        test_views: 0,
        width: size,
        height: size,
    })?;
    let (mut cams, mut images, mut pseudo) = (Vec::new(), Vec::new(), Vec::new());
    for v in scene.train_views() {
        let gt = scene.trace(v);
        pseudo.push(PseudoAlbedoMap {
            width: size,
            height: size,
            albedo: gt.albedo.data.iter().map(|a| a.clamp(1e-3, 1.0)).collect(),
            valid: gt.hit.clone(),
            provider: ProviderKind::GroundTruth,
        });
        images.push(gt.color);
        cams.push(v.camera.clone());
    }
    let (near, far) = (cams[0].near, cams[0].far);
    TrainData::new(cams, images, pseudo, near, far)
}

/// Desk-preset trainer on a 64×64 scene.
pub fn desk_trainer() -> Result<Trainer> {
    Trainer::new(RunConfig::desk(), two_planes_data(64)?)
}
