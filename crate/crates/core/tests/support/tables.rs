//! Reference layer tables at 208×160 and a checker that runs the networks
//! and compares every traced row.

use phs_core::networks::{
    discriminator_spec, generator_spec, reconstructor_spec, Activation, ArchConfig, LayerKind, NetworkSpec,
    NetworkState,
};
use phs_tensor::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// (layer, input, filter size, stride, IN, activation, output); `0` marks
/// a "-" cell.
pub type Row = (&'static str, (usize, usize, usize), usize, usize, bool, &'static str, (usize, usize, usize));

const RES: (usize, usize, usize) = (52, 40, 128);

fn trunk(input_c: usize, out_c: usize) -> Vec<Row> {
    let mut rows: Vec<Row> = vec![
        ("conv2d", (208, 160, input_c), 7, 1, true, "relu", (208, 160, 32)),
        ("conv2d", (208, 160, 32), 3, 2, true, "relu", (104, 80, 64)),
        ("conv2d", (104, 80, 64), 3, 2, true, "relu", RES),
    ];
    rows.extend(std::iter::repeat_n(("residual block", RES, 3, 1, true, "leaky_relu", RES), 6));
    rows.extend([
        ("upsampling2d", RES, 0, 0, false, "-", (104, 80, 128)),
        ("conv2d", (104, 80, 128), 3, 1, true, "relu", (104, 80, 64)),
        ("upsampling2d", (104, 80, 64), 0, 0, false, "-", (208, 160, 64)),
        ("conv2d", (208, 160, 64), 3, 1, true, "relu", (208, 160, 32)),
        ("conv2d", (208, 160, 32), 3, 1, false, "sigmoid", (208, 160, out_c)),
    ]);
    rows
}

pub fn generator_table() -> Vec<Row> {
    trunk(1, 1)
}

pub fn reconstructor_table() -> Vec<Row> {
    trunk(2, 2)
}

pub fn discriminator_table() -> Vec<Row> {
    vec![
        ("conv2d", (208, 160, 2), 4, 2, true, "leaky_relu", (104, 80, 32)),
        ("conv2d", (104, 80, 32), 4, 2, true, "leaky_relu", (52, 40, 128)),
        ("conv2d", (52, 40, 128), 4, 2, true, "leaky_relu", (26, 20, 256)),
        ("conv2d", (26, 20, 256), 4, 2, true, "leaky_relu", (13, 10, 512)),
        ("conv2d", (13, 10, 512), 4, 1, false, "sigmoid", (13, 10, 1)),
    ]
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::LeakyRelu => "leaky_relu",
        Activation::Sigmoid => "sigmoid",
        Activation::None => "-",
    }
}

/// Runs `spec` on a 208×160 input and renders each layer as a table row.
pub fn traced_rows(spec: NetworkSpec) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = spec.input_channels;
    let layers = spec.layers.clone();
    let net = NetworkState::init(spec, &mut rng);
    let x = Tensor::full(&[1, c, 208, 160], 0.5f32).unwrap();
    let (_, trace) = no_grad(|| net.forward_traced(&x)).unwrap();
    trace
        .iter()
        .zip(&layers)
        .map(|(t, l)| match l.kind {
            LayerKind::Upsample => ("upsampling2d", t.input, 0, 0, false, "-", t.output),
            LayerKind::Residual => {
                ("residual block", t.input, l.filter_size, l.stride, l.normalized, act_name(l.activation), t.output)
            }
            _ => ("conv2d", t.input, l.filter_size, l.stride, l.normalized, act_name(l.activation), t.output),
        })
        .collect()
}

/// Table-exact configuration: width 32, two-channel R output and a
/// two-channel discriminator input as printed.
pub fn table_networks() -> [(&'static str, Vec<Row>, Vec<Row>); 3] {
    let arch = ArchConfig { reconstructor_out: 2, ..ArchConfig::default() };
    let res = (208, 160);
    [
        ("G", generator_table(), traced_rows(generator_spec(res, &arch).unwrap())),
        ("R", reconstructor_table(), traced_rows(reconstructor_spec(res, &arch).unwrap())),
        ("D", discriminator_table(), traced_rows(discriminator_spec(2, res, &arch).unwrap())),
    ]
}

/// First mismatching row per network, or `None` when all rows agree.
pub fn first_mismatch() -> Option<String> {
    for (name, want, got) in table_networks() {
        if want.len() != got.len() {
            return Some(format!("{name}: {} rows, expected {}", got.len(), want.len()));
        }
        for (i, (w, g)) in want.iter().zip(&got).enumerate() {
            if w != g {
                return Some(format!("{name} row {i}: got {g:?}, expected {w:?}"));
            }
        }
    }
    None
}
