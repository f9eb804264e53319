//! Layer output shapes of the GAN branches and the classifier heads.

use icegan::data::FeatureVector;
use icegan::diffnet::{conv1d, conv2d, conv_transpose1d, LayerParams, Tensor};
use icegan::models::{concatenate, gan_forward, pgant_forward, ArchConfig, GanModel, PgantModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims(t: &Tensor) -> String {
    t.shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn hyper(l: &LayerParams) -> String {
    format!(
        "{}/{}/{}",
        l.hyper.filters, l.hyper.kernel.1, l.hyper.stride.1
    )
}

fn sample() -> FeatureVector {
    FeatureVector(std::array::from_fn(|k| ((k as f64) * 0.37).sin()))
}

#[test]
fn gan_branch_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gan = GanModel::new("gan_normal", 0.01, &mut rng);
    let x = Tensor::chw(1, 1, 28, sample().0.to_vec()).unwrap();
    assert_eq!(dims(&x), "1x1x28");

    for enc in [&gan.ge, &gan.de] {
        let h1 = conv1d(&x, &enc.conv1).unwrap();
        assert_eq!(
            format!("{}({})", dims(&h1), hyper(&enc.conv1)),
            "4x1x25(4/4/1)"
        );
        let h2 = conv1d(&h1, &enc.conv2).unwrap();
        assert_eq!(
            format!("{}({})", dims(&h2), hyper(&enc.conv2)),
            "8x1x22(8/4/1)"
        );
    }
    let h = conv1d(&conv1d(&x, &gan.ge.conv1).unwrap(), &gan.ge.conv2).unwrap();
    let d1 = conv_transpose1d(&h, &gan.gd.convt1).unwrap();
    assert_eq!(
        format!("{}({})", dims(&d1), hyper(&gan.gd.convt1)),
        "8x1x25(8/4/1)"
    );
    let d2 = conv_transpose1d(&d1, &gan.gd.convt2).unwrap();
    assert_eq!(
        format!("{}({})", dims(&d2), hyper(&gan.gd.convt2)),
        "1x1x28(1/4/1)"
    );

    let t = gan_forward(&gan, &sample()).unwrap();
    assert_eq!(dims(&t.h_ge), "8x1x22");
    assert_eq!(dims(&t.x_gd), "1x1x28");
    assert_eq!(dims(&t.h_de), "8x1x22");
    assert_eq!(dims(&t.y), "8x1x22");
}

#[test]
fn classifier_head_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = PgantModel::new(&ArchConfig::default(), &mut rng);
    let (normal, icing) = (model.normal.gan().unwrap(), model.icing.gan().unwrap());
    let y_n = gan_forward(normal, &sample()).unwrap().y;
    let y_ic = gan_forward(icing, &sample()).unwrap().y;
    let f = concatenate(&y_n, &y_ic).unwrap();
    assert_eq!(dims(&f), "8x2x22");

    let c = conv2d(&f, &model.cnn_fe.conv).unwrap();
    let h = model.cnn_fe.conv.hyper;
    let row = format!(
        "{}({}/({},{})/({},{}))",
        dims(&c),
        h.filters,
        h.kernel.0,
        h.kernel.1,
        h.stride.0,
        h.stride.1
    );
    assert_eq!(row, "4x2x19(4/(1,4)/(1,1))");

    let (y, d, fc1) = pgant_forward(&model, &sample()).unwrap();
    assert_eq!(d.len(), 4 * 2 * 19);
    assert_eq!(fc1.len(), 16);
    assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
}
