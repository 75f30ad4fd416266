//! Fixtures shared by the benchmarks.

use latentmark::autoencoder::{Autoencoder, AutoencoderConfig};
use latentmark::trainer::WatermarkModels;
use latentmark::WatermarkConfig;

/// Untrained desk-sized models (f = 8, 64×64, k = 16); timing does not depend on the weights.
pub fn desk_models() -> WatermarkModels<f32> {
    let ae = Autoencoder::new(AutoencoderConfig::desk(8)).expect("desk config is valid");
    let cfg = WatermarkConfig {
        k: 16,
        stage_channels: ae.decoder.stage_channels().to_vec(),
        image_size: 64,
        extractor_resolution: 64,
        ..WatermarkConfig::default()
    };
    WatermarkModels::new(ae, &cfg).expect("config matches the autoencoder")
}
