use latentmark::autoencoder::{default_corpus, pretrain_reference_autoencoder, AutoencoderConfig};

fn short(f: usize) -> AutoencoderConfig {
    AutoencoderConfig {
        image_size: 32,
        steps: 400,
        dataset_size: 1000,
        heldout_size: 32,
        ..AutoencoderConfig::desk(f)
    }
}

// Same corpus, same budget: the milder compression reconstructs better.
#[test]
fn smaller_downsample_factor_reconstructs_better() {
    let mut psnr = Vec::new();
    for f in [4, 8] {
        let cfg = short(f);
        let (_, rep) = pretrain_reference_autoencoder(&cfg, &default_corpus(&cfg), |_, _| {}).unwrap();
        assert!(rep.heldout_psnr.is_finite());
        psnr.push(rep.heldout_psnr);
    }
    assert!(psnr[0] > psnr[1], "f=4 {:.2} dB vs f=8 {:.2} dB", psnr[0], psnr[1]);
}
