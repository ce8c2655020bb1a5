//! Regenerates the committed fixture networks, images and the synthetic
//! square-detector dataset.
//!
//! ```text
//! cargo run -p relprop --example make_fixtures -- crates/core/fixtures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprop::eval::{DatasetManifest, DatasetRecord};
use relprop::model_io::{encode_netpbm, load_model, write_model, Raster};
use relprop::{Conv2D, Dense, LayerSpec, Network, Padding, Pool2D, ResidualBlock, Skip, Tensor};

const SIDE: usize = 16;
const SQUARE: usize = 4;
const N_IMAGES: usize = 1000;

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| f32r(rng.gen_range(-bound..bound))).collect()).unwrap()
}

fn dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, bias: bool) -> LayerSpec {
    LayerSpec::Dense(Dense {
        weights: random(rng, &[n_out, n_in], (3.0 / n_in as f64).sqrt()),
        bias: if bias { random(rng, &[n_out], 0.2) } else { Tensor::zeros(&[n_out]) },
    })
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, strides: (usize, usize), padding: Padding, bias: bool) -> Conv2D {
    Conv2D {
        kernel: random(rng, &[cout, k, k, cin], (3.0 / (k * k * cin) as f64).sqrt()),
        bias: if bias { random(rng, &[cout], 0.2) } else { Tensor::zeros(&[cout]) },
        strides,
        padding,
    }
}

fn dense2(rng: &mut ChaCha8Rng) -> Network {
    Network::new("dense2", vec![4], vec![dense(rng, 4, 3, true), dense(rng, 3, 2, true)]).unwrap()
}

fn conv_small(rng: &mut ChaCha8Rng) -> Network {
    Network::new(
        "conv_small",
        vec![6, 6, 2],
        vec![
            LayerSpec::Conv2D(conv(rng, 2, 3, 3, (1, 1), Padding::Valid, false)),
            LayerSpec::ReLU,
            LayerSpec::Conv2D(conv(rng, 3, 2, 2, (2, 2), Padding::Valid, false)),
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            dense(rng, 8, 3, false),
        ],
    )
    .unwrap()
}

fn conv_pool(rng: &mut ChaCha8Rng) -> Network {
    Network::new(
        "conv_pool",
        vec![8, 8, 3],
        vec![
            LayerSpec::Conv2D(conv(rng, 3, 4, 3, (1, 1), Padding::Same, true)),
            LayerSpec::ReLU,
            LayerSpec::MaxPool2D(Pool2D { pool: (2, 2), strides: (2, 2) }),
            LayerSpec::Conv2D(conv(rng, 4, 2, 2, (1, 1), Padding::Valid, true)),
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            dense(rng, 18, 4, true),
        ],
    )
    .unwrap()
}

fn resnet_small(rng: &mut ChaCha8Rng) -> Network {
    let identity = ResidualBlock {
        branch: vec![
            LayerSpec::Conv2D(conv(rng, 4, 4, 3, (1, 1), Padding::Same, true)),
            LayerSpec::ReLU,
            LayerSpec::Conv2D(conv(rng, 4, 4, 3, (1, 1), Padding::Same, true)),
        ],
        skip: Skip::Identity,
    };
    let projection = ResidualBlock {
        branch: vec![
            LayerSpec::Conv2D(conv(rng, 4, 6, 3, (2, 2), Padding::Same, true)),
            LayerSpec::ReLU,
            LayerSpec::Conv2D(conv(rng, 6, 6, 3, (1, 1), Padding::Same, true)),
        ],
        skip: Skip::Projection(conv(rng, 4, 6, 1, (2, 2), Padding::Same, false)),
    };
    Network::new(
        "resnet_small",
        vec![8, 8, 3],
        vec![
            LayerSpec::Conv2D(conv(rng, 3, 4, 3, (1, 1), Padding::Same, true)),
            LayerSpec::ReLU,
            LayerSpec::Residual(identity),
            LayerSpec::ReLU,
            LayerSpec::Residual(projection),
            LayerSpec::ReLU,
            LayerSpec::AvgPool2D(Pool2D { pool: (2, 2), strides: (2, 2) }),
            LayerSpec::Flatten,
            dense(rng, 24, 3, true),
        ],
    )
    .unwrap()
}

/// Every first-layer weight row pairs each input with its neighbour at the
/// opposite sign, so on a constant image `Σ w x` is exactly zero while the
/// positive biases keep the neurons active.
fn zero_denominator() -> Network {
    let n_in = 12;
    let mut w = Vec::with_capacity(4 * n_in);
    for j in 0..4 {
        for i in 0..n_in / 2 {
            let a = 0.25 * (1 + (i + j) % 3) as f64;
            w.extend([a, -a]);
        }
    }
    Network::new(
        "zero_denominator",
        vec![2, 2, 3],
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense(Dense {
                weights: Tensor::new(vec![4, n_in], w).unwrap(),
                bias: Tensor::vector(vec![0.5, 0.25, 0.75, 1.0]),
            }),
            LayerSpec::ReLU,
            LayerSpec::Dense(Dense {
                weights: Tensor::new(vec![2, 4], vec![1.0, 0.5, 0.25, 0.125, 0.125, 0.25, 0.5, 1.0]).unwrap(),
                bias: Tensor::zeros(&[2]),
            }),
        ],
    )
    .unwrap()
}

/// Template-matching conv (fires only where a bright 4x4 square sits), 2x2
/// max-pool, then one dense unit per image quadrant.
fn square_detector() -> Network {
    let taps = (SQUARE * SQUARE * 3) as f64;
    let pooled = SIDE / 2;
    let mut w = vec![0.0; 4 * pooled * pooled];
    for r in 0..pooled {
        for c in 0..pooled {
            let q = 2 * usize::from(r >= pooled / 2) + usize::from(c >= pooled / 2);
            w[q * pooled * pooled + r * pooled + c] = 1.0;
        }
    }
    let mut net = Network::new(
        "square_detector",
        vec![SIDE, SIDE, 3],
        vec![
            LayerSpec::Conv2D(Conv2D {
                kernel: Tensor::filled(&[1, SQUARE, SQUARE, 3], f32r(1.0 / taps)),
                bias: Tensor::vector(vec![-0.75]),
                strides: (1, 1),
                padding: Padding::Same,
            }),
            LayerSpec::ReLU,
            LayerSpec::MaxPool2D(Pool2D { pool: (2, 2), strides: (2, 2) }),
            LayerSpec::Flatten,
            LayerSpec::Dense(Dense {
                weights: Tensor::new(vec![4, pooled * pooled], w).unwrap(),
                bias: Tensor::zeros(&[4]),
            }),
        ],
    )
    .unwrap();
    net.class_labels = Some(["top-left", "top-right", "bottom-left", "bottom-right"].map(String::from).to_vec());
    net
}

fn gray_raster(values: &[u8]) -> Raster {
    Raster {
        width: SIDE,
        height: SIDE,
        channels: 3,
        pixels: values.iter().flat_map(|&v| [v, v, v]).collect(),
    }
}

fn write(path: &Path, bytes: &[u8]) {
    fs::write(path, bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

fn save(net: &Network, dir: &Path) {
    let manifest = dir.join(format!("{}.json", net.name));
    let blob = dir.join(format!("{}.bin", net.name));
    write_model(net, &manifest, &blob).unwrap();
    let back = load_model(&manifest, &blob).unwrap();
    assert_eq!(&back, net, "{} does not survive the f32 blob", net.name);
}

fn squares(dir: &Path, net: &Network, rng: &mut ChaCha8Rng) {
    let out = dir.join("squares");
    fs::create_dir_all(&out).unwrap();
    let mut records = Vec::with_capacity(N_IMAGES);
    let mut correct = 0;
    for i in 0..N_IMAGES {
        let r = rng.gen_range(0..=SIDE - SQUARE);
        let c = rng.gen_range(0..=SIDE - SQUARE);
        let mut img: Vec<u8> = (0..SIDE * SIDE).map(|_| rng.gen_range(0..=127)).collect();
        let mut mask = vec![0u8; SIDE * SIDE];
        for y in r..r + SQUARE {
            for x in c..c + SQUARE {
                img[y * SIDE + x] = 255;
                mask[y * SIDE + x] = 255;
            }
        }
        // quadrant holding the square's centre, r + 1.5 < 8 meaning top
        let class = 2 * usize::from(2 * r + SQUARE > SIDE) + usize::from(2 * c + SQUARE > SIDE);

        let image_name = format!("img_{i:04}.ppm");
        let mask_name = format!("mask_{i:04}.pgm");
        let ppm = encode_netpbm(&gray_raster(&img));
        let pgm = encode_netpbm(&Raster {
            width: SIDE,
            height: SIDE,
            channels: 1,
            pixels: mask,
        });
        write(&out.join(&image_name), &ppm);
        write(&out.join(&mask_name), &pgm);

        let x = relprop::model_io::load_image(out.join(&image_name)).unwrap();
        if net.predict_class(&x).unwrap() == class {
            correct += 1;
        }
        records.push(DatasetRecord {
            image: PathBuf::from(image_name),
            mask: Some(PathBuf::from(mask_name)),
            class: Some(class),
        });
    }
    let rate = correct as f64 / N_IMAGES as f64;
    assert!(rate >= 0.95, "square detector only classifies {rate} of its set");
    println!("square detector accuracy on its own set: {rate}");
    let manifest = DatasetManifest {
        percentages: None,
        records,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).unwrap();
    json.push(b'\n');
    write(&out.join("dataset.json"), &json);
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/fixtures".into()));
    fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for net in [dense2(&mut rng), conv_small(&mut rng), conv_pool(&mut rng), resnet_small(&mut rng), zero_denominator()] {
        save(&net, &dir);
    }
    let constant = Raster {
        width: 2,
        height: 2,
        channels: 3,
        pixels: vec![128; 12],
    };
    write(&dir.join("constant_2x2.ppm"), &encode_netpbm(&constant));

    let detector = square_detector();
    save(&detector, &dir);
    squares(&dir, &detector, &mut rng);
}
