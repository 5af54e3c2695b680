use std::net::SocketAddr;
use std::time::Duration;

use proptest::prelude::*;

use servosim::link::{
    decode_command, decode_frame, decode_framed, encode_command, encode_frame, encode_framed, run_channel_pair,
    DropOldest, FrameDecoder, FrameKind, FrameMessage, LatestCommand, LinkError, PerceptionLink, FRAME_HEADER_LEN,
};
use servosim::percept::{AvoidCommandMsg, Direction};

fn frame_strategy() -> impl Strategy<Value = FrameMessage> {
    (0u16..24, 0u16..24, any::<u32>(), any::<u64>(), prop::bool::ANY).prop_flat_map(|(w, h, seq, ts, reference)| {
        prop::collection::vec(any::<u16>(), w as usize * h as usize).prop_map(move |samples| FrameMessage {
            seq,
            timestamp_us: ts,
            width: w,
            height: h,
            kind: if reference { FrameKind::Reference } else { FrameKind::PseudoDepth },
            samples,
        })
    })
}

fn command_strategy() -> impl Strategy<Value = AvoidCommandMsg> {
    (0usize..3, any::<u32>(), 0u32..=10_000).prop_map(|(d, seq, frac)| AvoidCommandMsg {
        direction: [Direction::Left, Direction::Right, Direction::Center][d],
        seq,
        white_fraction: frac as f64 / 10_000.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frames_round_trip(msg in frame_strategy()) {
        let bytes = encode_frame(&msg);
        prop_assert_eq!(bytes.len(), FRAME_HEADER_LEN + 2 * msg.samples.len());
        prop_assert_eq!(&decode_frame(&bytes).unwrap(), &msg);
        prop_assert_eq!(&decode_framed(&encode_framed(&msg)).unwrap(), &msg);
    }

    #[test]
    fn commands_round_trip(msg in command_strategy()) {
        let decoded = decode_command(&encode_command(&msg)).unwrap();
        prop_assert_eq!(decoded, msg);
    }

    #[test]
    fn truncated_frames_are_rejected(msg in frame_strategy(), cut in 1usize..64) {
        let bytes = encode_framed(&msg);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_framed(&bytes[..keep]).is_err());
    }
}

#[test]
fn command_examples() {
    let left = decode_command(b"LEFT 42 0.1200").unwrap();
    assert_eq!(left, AvoidCommandMsg { direction: Direction::Left, seq: 42, white_fraction: 0.12 });
    assert_eq!(encode_command(&left), b"LEFT 42 0.1200");
    let center = AvoidCommandMsg { direction: Direction::Center, seq: 0, white_fraction: 0.0 };
    assert_eq!(encode_command(&center), b"CENTER 0 0.0000");
    assert!(matches!(decode_command(b"FORWARD 1 0.5000"), Err(LinkError::UnknownToken(t)) if t == "FORWARD"));
    assert!(matches!(decode_command(b"LEFT x 0.5"), Err(LinkError::BadNumber(_))));
    assert!(matches!(decode_command(b"LEFT 1 -0.5"), Err(LinkError::BadNumber(_))));
    assert!(matches!(decode_command(b"LEFT 1 0.5 extra"), Err(LinkError::TrailingGarbage)));
    assert!(matches!(decode_command("LEFT 1 0.5\u{e9}".as_bytes()), Err(LinkError::NotAscii)));
}

#[test]
fn frame_error_examples() {
    let msg = FrameMessage { seq: 7, timestamp_us: 250_000, width: 2, height: 1, kind: FrameKind::PseudoDepth, samples: vec![3, 1000] };
    let mut bad = encode_frame(&msg);
    bad[3] = b'X';
    assert!(matches!(decode_frame(&bad), Err(LinkError::BadMagic(m)) if &m == b"FRMX"));
    let good = encode_frame(&msg);
    assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(LinkError::Truncated { .. })));
    assert!(matches!(decode_frame(&good[..10]), Err(LinkError::Truncated { .. })));
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode_frame(&long), Err(LinkError::LengthMismatch { .. })));
    let mut kind = good.clone();
    kind[20] = 9;
    assert!(matches!(decode_frame(&kind), Err(LinkError::UnknownKind(9))));
}

#[test]
fn stream_decoder_reassembles_split_messages() {
    let frames: Vec<FrameMessage> = (0..5)
        .map(|i| FrameMessage { seq: i, timestamp_us: i as u64 * 250_000, width: 3, height: 2, kind: FrameKind::PseudoDepth, samples: vec![i as u16; 6] })
        .collect();
    let stream: Vec<u8> = frames.iter().flat_map(encode_framed).collect();
    for chunk in [1, 3, 7, 64] {
        let mut dec = FrameDecoder::default();
        let mut out = Vec::new();
        for piece in stream.chunks(chunk) {
            dec.push(piece);
            while let Some(f) = dec.next_frame().unwrap() {
                out.push(f);
            }
        }
        assert_eq!(out, frames);
        assert_eq!(dec.pending_bytes(), 0);
    }
}

fn cmd(direction: Direction, seq: u32) -> AvoidCommandMsg {
    AvoidCommandMsg { direction, seq, white_fraction: 0.1 }
}

#[test]
fn latest_command_wins_and_goes_stale() {
    let mut slot = LatestCommand::new(0.6);
    assert!(slot.fresh(0.0).is_none());
    assert!(slot.offer(cmd(Direction::Left, 1), 0.0));
    assert!(slot.offer(cmd(Direction::Right, 3), 0.1));
    assert!(!slot.offer(cmd(Direction::Left, 2), 0.2));
    assert_eq!(slot.fresh(0.2).unwrap().seq, 3);
    // Received at 0.1; at 0.7 it is exactly 0.6 old, at 0.8 past the window.
    assert!(slot.fresh(0.7).is_some());
    let late = slot.latest(0.8).unwrap();
    assert!(late.stale && late.msg.seq == 3);
    assert!(slot.fresh(0.8).is_none());

    let mut slot = LatestCommand::new(0.6);
    slot.offer(cmd(Direction::Left, 1), 0.0);
    assert!(slot.latest(0.7).unwrap().stale);
}

#[test]
fn drop_oldest_keeps_the_newest() {
    let mut q = DropOldest::new(3);
    for i in 0..10 {
        q.push(i);
    }
    assert_eq!((q.len(), q.dropped()), (3, 7));
    assert_eq!(q.pop(), Some(7));
    q.push(10);
    assert_eq!(q.take_newest(), Some(10));
    assert!(q.is_empty());
    assert_eq!(q.dropped(), 9);
}

#[test]
fn loopback_channels_carry_frames_and_commands() {
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let mut ctrl = run_channel_pair("127.0.0.1:9".parse().unwrap(), any, 0.6).unwrap();
    let mut percept = PerceptionLink::bind(any, ctrl.command_addr().unwrap()).unwrap();
    ctrl.set_frame_addr(percept.frame_addr().unwrap());
    let frame = FrameMessage { seq: 1, timestamp_us: 250_000, width: 4, height: 2, kind: FrameKind::PseudoDepth, samples: (0..8).collect() };
    ctrl.send_frame(&frame).unwrap();
    assert!(ctrl.is_connected());
    let got = percept.recv_frames().unwrap();
    assert_eq!(got, vec![frame]);

    percept.send_command(&cmd(Direction::Right, 1)).unwrap();
    let msg = ctrl.wait_for(1, Duration::from_secs(5)).unwrap().unwrap();
    assert_eq!(msg, cmd(Direction::Right, 1));

    ctrl.close();
    assert!(matches!(percept.recv_frames(), Err(LinkError::Closed)));
}
