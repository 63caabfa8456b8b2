//! Wire protocol for external environments.
//!
//! Length-prefixed binary messages over a byte stream, little-endian
//! integers throughout. The peer (the environment provider) sends HELLO
//! on connect; the client drives RESET/STEP and receives FRAME replies;
//! either side closes with BYE.
//!
//! ```text
//! message  := len:u32 tag:u8 payload
//! HELLO(1) := version:u32 action_count:u32 width:u32 height:u32
//! RESET(2) := seed:u64
//! STEP(3)  := action:u32
//! FRAME(4) := reward:f64 done:u8 rgb:bytes (row-major, 3 per pixel)
//! BYE(5)   := (empty)
//! ```

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::env::{Environment, Frame, StepOutcome};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on accepted message payloads; a corrupt length prefix
/// must not trigger a giant allocation.
const MAX_MESSAGE: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u32,
        action_count: u32,
        width: u32,
        height: u32,
    },
    Reset {
        seed: u64,
    },
    Step {
        action: u32,
    },
    Frame {
        reward: f64,
        done: bool,
        rgb: Vec<u8>,
    },
    Bye,
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    let mut payload = Vec::new();
    match msg {
        Message::Hello {
            version,
            action_count,
            width,
            height,
        } => {
            payload.push(1u8);
            payload.write_u32::<LittleEndian>(*version)?;
            payload.write_u32::<LittleEndian>(*action_count)?;
            payload.write_u32::<LittleEndian>(*width)?;
            payload.write_u32::<LittleEndian>(*height)?;
        }
        Message::Reset { seed } => {
            payload.push(2u8);
            payload.write_u64::<LittleEndian>(*seed)?;
        }
        Message::Step { action } => {
            payload.push(3u8);
            payload.write_u32::<LittleEndian>(*action)?;
        }
        Message::Frame { reward, done, rgb } => {
            payload.push(4u8);
            payload.write_f64::<LittleEndian>(*reward)?;
            payload.push(*done as u8);
            payload.extend_from_slice(rgb);
        }
        Message::Bye => payload.push(5u8),
    }
    w.write_u32::<LittleEndian>(payload.len() as u32)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let len = r.read_u32::<LittleEndian>()?;
    if len == 0 || len > MAX_MESSAGE {
        return Err(Error::Protocol(format!("invalid message length {len}")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    let tag = payload[0];
    let mut body = &payload[1..];
    let msg = match tag {
        1 => {
            if body.len() != 16 {
                return Err(Error::Protocol("malformed HELLO".into()));
            }
            Message::Hello {
                version: body.read_u32::<LittleEndian>()?,
                action_count: body.read_u32::<LittleEndian>()?,
                width: body.read_u32::<LittleEndian>()?,
                height: body.read_u32::<LittleEndian>()?,
            }
        }
        2 => {
            if body.len() != 8 {
                return Err(Error::Protocol("malformed RESET".into()));
            }
            Message::Reset {
                seed: body.read_u64::<LittleEndian>()?,
            }
        }
        3 => {
            if body.len() != 4 {
                return Err(Error::Protocol("malformed STEP".into()));
            }
            Message::Step {
                action: body.read_u32::<LittleEndian>()?,
            }
        }
        4 => {
            if body.len() < 9 {
                return Err(Error::Protocol("malformed FRAME".into()));
            }
            let reward = body.read_f64::<LittleEndian>()?;
            let done = body.read_u8()? != 0;
            Message::Frame {
                reward,
                done,
                rgb: body.to_vec(),
            }
        }
        5 => Message::Bye,
        other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
    };
    Ok(msg)
}

/// Client side: an [`Environment`] backed by a remote peer.
pub struct ExternalEnv {
    stream: TcpStream,
    action_count: usize,
    width: usize,
    height: usize,
    dead: bool,
}

impl ExternalEnv {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Protocol(format!("cannot resolve '{endpoint}': {e}")))?
            .next()
            .ok_or_else(|| Error::Protocol(format!("cannot resolve '{endpoint}'")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| Error::Protocol(format!("cannot connect to {endpoint}: {e}")))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;

        let mut stream = stream;
        let hello = read_message(&mut stream)
            .map_err(|e| Error::Protocol(format!("handshake failed: {e}")))?;
        match hello {
            Message::Hello {
                version,
                action_count,
                width,
                height,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!(
                        "protocol version mismatch: peer speaks {version}, this side speaks {PROTOCOL_VERSION}"
                    )));
                }
                if action_count == 0 || width == 0 || height == 0 {
                    return Err(Error::Protocol(
                        "peer announced an empty action set or frame".into(),
                    ));
                }
                Ok(ExternalEnv {
                    stream,
                    action_count: action_count as usize,
                    width: width as usize,
                    height: height as usize,
                    dead: false,
                })
            }
            other => Err(Error::Protocol(format!(
                "expected HELLO, got {other:?}"
            ))),
        }
    }

    fn expect_frame(&mut self) -> Result<(Frame, f64, bool)> {
        let msg = read_message(&mut self.stream).map_err(|e| {
            self.dead = true;
            Error::Protocol(format!("peer lost mid-episode: {e}"))
        })?;
        match msg {
            Message::Frame { reward, done, rgb } => {
                if rgb.len() != 3 * self.width * self.height {
                    self.dead = true;
                    return Err(Error::Protocol(format!(
                        "malformed frame: got {} bytes, expected {}",
                        rgb.len(),
                        3 * self.width * self.height
                    )));
                }
                Ok((Frame::new(self.width, self.height, rgb), reward, done))
            }
            other => {
                self.dead = true;
                Err(Error::Protocol(format!("expected FRAME, got {other:?}")))
            }
        }
    }

    fn check_alive(&self) -> Result<()> {
        if self.dead {
            Err(Error::Protocol("connection marked dead".into()))
        } else {
            Ok(())
        }
    }
}

impl Environment for ExternalEnv {
    fn action_count(&self) -> usize {
        self.action_count
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn reset(&mut self, seed: u64) -> Result<Frame> {
        self.check_alive()?;
        write_message(&mut self.stream, &Message::Reset { seed }).map_err(|e| {
            self.dead = true;
            e
        })?;
        let (frame, _, _) = self.expect_frame()?;
        Ok(frame)
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        self.check_alive()?;
        write_message(
            &mut self.stream,
            &Message::Step {
                action: action as u32,
            },
        )
        .map_err(|e| {
            self.dead = true;
            e
        })?;
        let (frame, reward, done) = self.expect_frame()?;
        Ok(StepOutcome {
            frame,
            reward,
            done,
        })
    }
}

impl Drop for ExternalEnv {
    fn drop(&mut self) {
        if !self.dead {
            let _ = write_message(&mut self.stream, &Message::Bye);
        }
    }
}

/// Server side: speaks the protocol over one connection, proxying a
/// local environment. Returns when the peer says BYE or disconnects.
pub fn serve_connection(env: &mut dyn Environment, stream: &mut TcpStream) -> Result<()> {
    stream.set_nodelay(true)?;
    let (width, height) = env.frame_size();
    write_message(
        stream,
        &Message::Hello {
            version: PROTOCOL_VERSION,
            action_count: env.action_count() as u32,
            width: width as u32,
            height: height as u32,
        },
    )?;
    loop {
        let msg = match read_message(stream) {
            Ok(m) => m,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        match msg {
            Message::Reset { seed } => {
                let frame = env.reset(seed)?;
                write_message(
                    stream,
                    &Message::Frame {
                        reward: 0.0,
                        done: false,
                        rgb: frame.rgb,
                    },
                )?;
            }
            Message::Step { action } => {
                let out = env.step(action as usize)?;
                write_message(
                    stream,
                    &Message::Frame {
                        reward: out.reward,
                        done: out.done,
                        rgb: out.frame.rgb,
                    },
                )?;
            }
            Message::Bye => return Ok(()),
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected message from client: {other:?}"
                )))
            }
        }
    }
}

/// Accepts one connection on `listener` and serves `env` over it.
pub fn serve_once(listener: &TcpListener, env: &mut dyn Environment) -> Result<()> {
    let (mut stream, _) = listener.accept()?;
    serve_connection(env, &mut stream)
}
