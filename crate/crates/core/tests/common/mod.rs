#![allow(dead_code)]

use std::any::Any;

use flcovert::covert::{self, ChannelParams, EdgeExample, PairPolicy, ReceiverAgent, SenderAgent, SenderConfig};
use flcovert::data::{self, TransformKind};
use flcovert::fl::{ClientId, ClientKind, FlClient, FlError, FlSystem, LocalUpdate, RoundContext};
use flcovert::nn::{self, Activation, NetSpec, ParamVector, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Honest participant that never learns: it echoes the broadcast model.
pub struct Frozen {
    pub id: ClientId,
    pub count: usize,
}

impl FlClient for Frozen {
    fn id(&self) -> ClientId {
        self.id
    }
    fn kind(&self) -> ClientKind {
        ClientKind::Honest
    }
    fn step(&mut self, ctx: &RoundContext<'_>) -> Result<Option<LocalUpdate>, FlError> {
        Ok(ctx.selected.then(|| LocalUpdate {
            model: ctx.model.clone(),
            example_count: self.count,
        }))
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// A small trained model on 8x8 synthetic blobs and a pool of edge examples.
pub struct Toy {
    pub spec: NetSpec,
    pub model: ParamVector,
    pub edges: Vec<EdgeExample>,
    pub data: data::Dataset,
}

pub fn toy(seed: u64) -> Toy {
    let ds = data::make_synthetic(64, 4, 400, seed).unwrap();
    let spec = NetSpec::mlp(64, &[32], 4).unwrap();
    let init = nn::init_model(&spec, seed);
    let cfg = TrainConfig { epochs: 10, batch_size: 32, learning_rate: 0.1, shuffle_seed: seed };
    let model = nn::train_local(&init, &spec, &ds, &cfg).unwrap();
    let harvest = covert::harvest_edges(
        &model,
        &spec,
        &ds,
        &[TransformKind::VMix, TransformKind::HMix],
        200,
        PairPolicy::Any,
        seed,
    )
    .unwrap();
    assert!(!harvest.edges.is_empty(), "no edge example on the toy model");
    Toy { spec, model, edges: harvest.edges, data: ds }
}

pub struct ScriptedOutcome {
    pub sent: Vec<Vec<u8>>,
    pub decoded: Vec<Vec<u8>>,
    pub frames: Vec<Vec<covert::ReceivedFrame>>,
}

/// Noise-free channel: frozen honest clients, everybody selected every round,
/// so the global model moves only when Sender poisons it.
pub fn scripted_channel(toy: &Toy, k: usize, n_bits: usize, f: usize, seed: u64) -> ScriptedOutcome {
    let (channels, _) = covert::choose_channels(&toy.edges, k);
    assert_eq!(channels.len(), k);
    let params: Vec<ChannelParams> = channels.into_iter().map(|e| ChannelParams::new(f, e).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<Vec<u8>> = (0..k).map(|_| (0..n_bits).map(|_| rng.random_range(0..=1u8)).collect()).collect();

    let mut system = FlSystem::new(toy.spec.clone(), toy.model.clone(), 1.0, seed).unwrap();
    let honest = 4;
    for id in 0..honest {
        system.join(Box::new(Frozen { id, count: 100 })).unwrap();
    }
    let (rx, tx) = (honest, honest + 1);
    let mut receiver = ReceiverAgent::new(rx);
    receiver.configure(params.clone(), 0).unwrap();
    system.join(Box::new(receiver)).unwrap();
    let cfg = SenderConfig {
        train: TrainConfig { epochs: 1, batch_size: 16, learning_rate: 0.1, shuffle_seed: 0 },
        copies: 64 * k,
        reported_count: 100 * honest,
        distance_cap: None,
        seed,
    };
    let sender = SenderAgent::new(tx, params, bits.clone(), 0, cfg, 4).unwrap();
    system.join(Box::new(sender)).unwrap();
    for _ in 0..n_bits * f {
        let log = system.run_round().unwrap();
        assert!(log.selected_ids.contains(&tx));
    }
    let receiver = system.client_as::<ReceiverAgent>(rx).unwrap();
    let sender = system.client_as::<SenderAgent>(tx).unwrap();
    ScriptedOutcome {
        sent: (0..k).map(|c| sender.sent_bits(c).to_vec()).collect(),
        decoded: (0..k).map(|c| receiver.state().decoded_bits(c)).collect(),
        frames: receiver.state().frames.clone(),
    }
}

/// Smallest |pre-activation| over the hidden ReLU units for `x`.
pub fn min_hidden_preactivation(params: &[f64], spec: &NetSpec, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut off = 0;
    let mut min = f64::INFINITY;
    for layer in spec.layers() {
        let (n_in, n_out) = (layer.input_dim, layer.output_dim);
        let mut z = params[off + n_in * n_out..off + n_in * n_out + n_out].to_vec();
        for i in 0..n_in {
            for j in 0..n_out {
                z[j] += a[i] * params[off + i * n_out + j];
            }
        }
        if layer.activation == Activation::Relu {
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        off += n_in * n_out + n_out;
        a = z;
    }
    min
}
