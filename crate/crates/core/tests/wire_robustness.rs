use icp2p_core::controller::ControlDirective;
use icp2p_core::metrics::MetricVector;
use icp2p_core::proto::wire::{decode, encode, Message, ModelPacket, ScoreReport, WireError, HEADER_LEN};
use icp2p_core::ParamVector;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: &[u8] = include_bytes!("golden/model_packet_2params.bin");

fn golden_packet() -> Message {
    Message::Model(ModelPacket {
        sender: 1,
        cycle: 0,
        site_rounds: 5,
        metrics: MetricVector {
            psnr: 30.0,
            ssim: 0.9,
            mse: 0.001,
        },
        params: ParamVector::new(vec![0.25, -0.5]).unwrap(),
        g_prev: Some(ParamVector::new(vec![1e-3, -2e-3]).unwrap()),
        directive: None,
    })
}

/// The same frame assembled field by field.
fn hand_assembled() -> Vec<u8> {
    let mut payload = Vec::new();
    for v in [1u32, 0, 5] {
        payload.extend(v.to_le_bytes());
    }
    for v in [30.0f64, 0.9, 0.001] {
        payload.extend(v.to_le_bytes());
    }
    for vector in [[0.25f32, -0.5], [1e-3, -2e-3]] {
        payload.extend(2u64.to_le_bytes());
        for v in vector {
            payload.extend(v.to_le_bytes());
        }
    }
    let mut frame = b"ICP2".to_vec();
    frame.extend(1u16.to_le_bytes());
    frame.extend([1u8, 0b01]);
    frame.extend((payload.len() as u64).to_le_bytes());
    frame.extend(payload);
    let crc = crc32fast::hash(&frame);
    frame.extend(crc.to_le_bytes());
    frame
}

#[test]
fn two_parameter_packet_matches_golden_bytes() {
    assert_eq!(hand_assembled(), GOLDEN);
    let bytes = encode(&golden_packet()).unwrap();
    assert_eq!(bytes, GOLDEN, "{}", hex::encode(&bytes));
    assert_eq!(decode(GOLDEN).unwrap(), golden_packet());
}

pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let metrics = MetricVector {
        psnr: rng.gen_range(0.0..60.0),
        ssim: rng.gen_range(-1.0..1.0),
        mse: rng.gen_range(0.0..1.0),
    };
    let vector = |rng: &mut ChaCha8Rng, n: usize| {
        ParamVector::new((0..n).map(|_| rng.gen_range(-10.0f32..10.0)).collect()).unwrap()
    };
    let directive = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..6);
        let mut sequence: Vec<u32> = (1..=n as u32).collect();
        sequence.shuffle(rng);
        ControlDirective {
            sequence,
            site_rounds: (0..n).map(|_| rng.gen_range(1..10)).collect(),
            trans_rounds: rng.gen_range(1..20),
            streak: rng.gen_range(0..3),
            converged: rng.gen(),
        }
    };
    match rng.gen_range(0..3) {
        0 => {
            let n = rng.gen_range(1..64);
            Message::Model(ModelPacket {
                sender: rng.gen(),
                cycle: rng.gen(),
                site_rounds: rng.gen(),
                metrics,
                params: vector(rng, n),
                g_prev: rng.gen::<bool>().then(|| vector(rng, n)),
                directive: rng.gen::<bool>().then(|| directive(rng)),
            })
        }
        1 => Message::Score(ScoreReport {
            institution: rng.gen(),
            cycle: rng.gen(),
            metrics,
        }),
        _ => Message::Directive(directive(rng)),
    }
}

#[test]
fn random_messages_roundtrip_byte_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let msg = random_message(&mut rng);
        let bytes = encode(&msg).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, msg);
        assert_eq!(encode(&back).unwrap(), bytes);
    }
}

#[test]
fn every_payload_bit_flip_is_caught_by_the_crc() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let bytes = encode(&random_message(&mut rng)).unwrap();
        for bit in HEADER_LEN * 8..(bytes.len() - 4) * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            assert!(matches!(decode(&b), Err(WireError::CrcMismatch { .. })));
        }
    }
}

#[test]
fn random_byte_strings_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let valid = encode(&golden_packet()).unwrap();
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 3 == 0 {
            let n = rng.gen_range(0..200);
            (0..n).map(|_| rng.gen()).collect()
        } else if i % 3 == 1 {
            // garbage payload behind a consistent header and CRC
            let n = rng.gen_range(0..120);
            let mut b = valid[..HEADER_LEN].to_vec();
            b[6] = rng.gen_range(0..5);
            b[7] = rng.gen_range(0..4);
            b[8..16].copy_from_slice(&(n as u64).to_le_bytes());
            b.extend((0..n).map(|_| rng.gen::<u8>()));
            let crc = crc32fast::hash(&b);
            b.extend(crc.to_le_bytes());
            b
        } else {
            // keep a plausible header so deeper checks are reached
            let mut b = valid.clone();
            let n = rng.gen_range(1..8);
            for _ in 0..n {
                let at = rng.gen_range(0..b.len());
                b[at] = rng.gen();
            }
            b.truncate(rng.gen_range(0..=b.len()));
            b
        };
        let _ = decode(&bytes);
    }
}

proptest! {
    #[test]
    fn decode_never_panics_on_arbitrary_input(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn reencoding_a_decoded_frame_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes = encode(&random_message(&mut rng)).unwrap();
        prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }
}
