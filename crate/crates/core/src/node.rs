//! Perception peer: receives frames over the link, thresholds them and sends
//! avoidance commands back.

use crate::link::{FrameDecoder, FrameKind, FrameMessage, LinkError, PerceptionLink};
use crate::percept::{process_frame, AvoidCommandMsg, PerceptError, PerceptParams};
use crate::simcam::DepthMap;

/// Timestamps closer than this to the rate period still count as on time.
const RATE_SLACK_US: u64 = 1_000;

/// Stateful frame handler shared by the live server and offline replay.
#[derive(Debug, Clone)]
pub struct PerceptionNode {
    params: PerceptParams,
    last_processed_us: Option<u64>,
    reference: Option<(u32, DepthMap)>,
}

impl PerceptionNode {
    pub fn new(params: PerceptParams) -> Self {
        Self {
            params,
            last_processed_us: None,
            reference: None,
        }
    }

    fn period_us(&self) -> u64 {
        (1e6 / self.params.rate_hz).round() as u64
    }

    /// Handles one batch of frames that arrived together. Only the newest
    /// depth frame is processed, and only if the rate budget allows it.
    pub fn handle_batch(&mut self, frames: Vec<FrameMessage>) -> Result<Option<AvoidCommandMsg>, PerceptError> {
        let mut newest: Option<FrameMessage> = None;
        for f in frames {
            match f.kind {
                FrameKind::Reference => self.reference = Some((f.seq, f.to_depth())),
                FrameKind::PseudoDepth => {
                    if newest.as_ref().is_none_or(|n| f.seq > n.seq) {
                        newest = Some(f);
                    }
                }
            }
        }
        let Some(frame) = newest else { return Ok(None) };
        if let Some(last) = self.last_processed_us {
            if frame.timestamp_us + RATE_SLACK_US < last + self.period_us() {
                return Ok(None);
            }
        }
        self.last_processed_us = Some(frame.timestamp_us);
        let depth = frame.to_depth();
        let reference = self.reference.as_ref().filter(|(seq, _)| *seq == frame.seq).map(|(_, r)| r);
        let decision = process_frame(&depth, reference, &self.params)?;
        Ok(Some(AvoidCommandMsg {
            direction: decision.direction,
            seq: frame.seq,
            white_fraction: decision.stats.white_fraction,
        }))
    }
}

/// Serves one controller connection until it closes the frame stream.
pub fn serve(mut link: PerceptionLink, params: PerceptParams) -> Result<u64, LinkError> {
    let mut node = PerceptionNode::new(params);
    let mut sent = 0;
    loop {
        let frames = match link.recv_frames() {
            Ok(f) => f,
            Err(LinkError::Closed) => return Ok(sent),
            Err(e) => return Err(e),
        };
        match node.handle_batch(frames) {
            Ok(Some(cmd)) => {
                link.send_command(&cmd)?;
                sent += 1;
            }
            Ok(None) => {}
            Err(e) => log::warn!("perception step failed: {e}"),
        }
    }
}

/// Re-runs the decision stage over a recorded frame log, one frame at a time.
pub fn replay_frames(bytes: &[u8], params: PerceptParams) -> Result<Vec<AvoidCommandMsg>, LinkError> {
    let mut decoder = FrameDecoder::default();
    decoder.push(bytes);
    let mut node = PerceptionNode::new(params);
    let mut out = Vec::new();
    let mut pending_reference = None;
    while let Some(f) = decoder.next_frame()? {
        if f.kind == FrameKind::Reference {
            pending_reference = Some(f);
            continue;
        }
        let mut batch: Vec<FrameMessage> = pending_reference.take().into_iter().collect();
        batch.push(f);
        match node.handle_batch(batch) {
            Ok(Some(cmd)) => out.push(cmd),
            Ok(None) => {}
            Err(e) => log::warn!("replay step failed: {e}"),
        }
    }
    if decoder.pending_bytes() > 0 {
        return Err(LinkError::Truncated {
            declared: 0,
            available: decoder.pending_bytes(),
        });
    }
    Ok(out)
}
