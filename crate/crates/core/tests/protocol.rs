use std::collections::BTreeMap;

use fjl_core::federation::protocol::{decode_header, decode_message, encode_message, read_frame, FRAME_HEADER_LEN};
use fjl_core::federation::{ClientStats, GradientUpdate, Message, RoundReport};
use proptest::prelude::*;

fn any_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>(),
        -1e3f64..1e3,
        Just(f64::NAN),
        Just(f64::INFINITY),
        Just(-0.0),
    ]
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any_f64(), 0..48)
}

fn message() -> impl Strategy<Value = Message> {
    let id = "[a-zA-Z0-9_\\-é]{0,12}";
    prop_oneof![
        id.prop_map(|client_id| Message::Register { client_id }),
        (any::<u32>(), any::<u64>(), vector(), prop::collection::vec(vector(), 0..3)).prop_map(
            |(round, layout_hash, params, peers)| Message::ModelBroadcast {
                round,
                layout_hash,
                params,
                peers
            }
        ),
        (id, any::<u32>(), vector(), any::<u64>(), any_f64(), any::<u64>()).prop_map(
            |(client_id, round, delta, n_samples, local_loss, layout_hash)| {
                Message::GradUpload(GradientUpdate {
                    client_id,
                    round,
                    delta,
                    n_samples,
                    local_loss,
                    layout_hash,
                })
            }
        ),
        (
            any::<u32>(),
            any_f64(),
            any_f64(),
            any_f64(),
            any_f64(),
            prop::collection::btree_map(id, (any_f64(), any::<u64>()), 0..5)
        )
            .prop_map(|(round, global_loss, global_pck, spearman_loss_metric, wall_time, clients)| {
                let per_client: BTreeMap<String, ClientStats> = clients
                    .into_iter()
                    .map(|(k, (local_loss, n_samples))| (k, ClientStats { local_loss, n_samples }))
                    .collect();
                Message::RoundEnd(RoundReport {
                    round,
                    global_loss,
                    global_pck,
                    spearman_loss_metric,
                    per_client,
                    wall_time,
                })
            }),
        Just(Message::Shutdown),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip_is_identity(msg in message()) {
        let frame = encode_message(&msg);
        let back = decode_message(&frame).unwrap();
        prop_assert_eq!(back.kind(), msg.kind());
        // Bytewise comparison also covers NaN payloads.
        prop_assert_eq!(encode_message(&back), frame.clone());
        let (kind, len) = decode_header(&frame[..FRAME_HEADER_LEN]).unwrap();
        prop_assert_eq!(kind, msg.kind());
        prop_assert_eq!(len, frame.len() - FRAME_HEADER_LEN);
        prop_assert_eq!(read_frame(&mut frame.as_slice()).unwrap(), frame);
    }
}

proptest! {
    #[test]
    fn truncated_or_extended_frames_are_rejected(msg in message(), cut in any::<prop::sample::Index>(), extra in any::<u8>()) {
        let frame = encode_message(&msg);
        let at = cut.index(frame.len());
        prop_assert!(decode_message(&frame[..at]).is_err());
        let mut longer = frame.clone();
        longer.push(extra);
        prop_assert!(decode_message(&longer).is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected(msg in message(), pos in 0usize..4, flip in 1u8..=255) {
        let mut frame = encode_message(&msg);
        frame[pos] ^= flip;
        prop_assert!(decode_message(&frame).is_err());
    }
}

#[test]
fn unknown_kind_is_rejected() {
    let mut frame = encode_message(&Message::Shutdown);
    frame[4] = 9;
    assert!(decode_message(&frame).is_err());
}
