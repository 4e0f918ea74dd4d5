/**
 * Minimal PNG codec for the label/mask/tile rasters the server exchanges.
 *
 * We cannot use a <canvas> for this: canvas decoding is not available under
 * node (where the scripted session and tests run) and premultiplied-alpha
 * round-trips are not guaranteed bit-exact. zlib comes from fflate; only the
 * chunk and scanline-filter layers live here.
 *
 * Supported: 8-bit grayscale / RGB / RGBA and 16-bit grayscale (superpixel
 * maps), non-interlaced. That covers everything the server emits.
 */
import { zlibSync, unzlibSync } from "fflate";

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

export interface RawImage {
  width: number;
  height: number;
  /** samples per pixel: 1 gray, 3 RGB, 4 RGBA */
  channels: 1 | 3 | 4;
  /** row-major, channel-interleaved; 16-bit images use Uint16Array */
  data: Uint8Array | Uint16Array;
}

const CRC_TABLE = (() => {
  const t = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    t[n] = c;
  }
  return t;
})();

function crc32(bytes: Uint8Array, start: number, end: number): number {
  let c = 0xffffffff;
  for (let i = start; i < end; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + body.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, body.length);
  for (let i = 0; i < 4; i++) out[4 + i] = type.charCodeAt(i);
  out.set(body, 8);
  view.setUint32(8 + body.length, crc32(out, 4, 8 + body.length));
  return out;
}

function colorType(channels: number): number {
  if (channels === 1) return 0;
  if (channels === 3) return 2;
  if (channels === 4) return 6;
  throw new Error(`unsupported channel count ${channels}`);
}

/** Encode with filter 0 on every row; the server accepts any valid stream. */
export function encodePng(img: RawImage): Uint8Array {
  const { width, height, channels, data } = img;
  const sixteen = data instanceof Uint16Array;
  if (data.length !== width * height * channels) {
    throw new Error("pixel buffer does not match dimensions");
  }
  const bytesPerPx = channels * (sixteen ? 2 : 1);
  const stride = width * bytesPerPx;
  const raw = new Uint8Array(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    const rowAt = y * (stride + 1);
    raw[rowAt] = 0; // filter: none
    const src = y * width * channels;
    if (sixteen) {
      for (let i = 0; i < width * channels; i++) {
        const v = data[src + i];
        raw[rowAt + 1 + 2 * i] = v >>> 8;
        raw[rowAt + 2 + 2 * i] = v & 0xff;
      }
    } else {
      raw.set((data as Uint8Array).subarray(src, src + stride), rowAt + 1);
    }
  }

  const ihdr = new Uint8Array(13);
  const hv = new DataView(ihdr.buffer);
  hv.setUint32(0, width);
  hv.setUint32(4, height);
  ihdr[8] = sixteen ? 16 : 8;
  ihdr[9] = colorType(channels);
  // compression 0, filter 0, interlace 0 already zeroed

  const parts = [
    new Uint8Array(SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("IDAT", zlibSync(raw, { level: 6 })),
    chunk("IEND", new Uint8Array(0)),
  ];
  let total = 0;
  for (const p of parts) total += p.length;
  const out = new Uint8Array(total);
  let at = 0;
  for (const p of parts) {
    out.set(p, at);
    at += p.length;
  }
  return out;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

export function decodePng(bytes: Uint8Array): RawImage {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);

  let width = 0;
  let height = 0;
  let depth = 0;
  let color = -1;
  const idat: Uint8Array[] = [];
  let at = 8;
  while (at < bytes.length) {
    const len = view.getUint32(at);
    const type = String.fromCharCode(
      bytes[at + 4], bytes[at + 5], bytes[at + 6], bytes[at + 7]);
    const body = bytes.subarray(at + 8, at + 8 + len);
    if (type === "IHDR") {
      width = view.getUint32(at + 8);
      height = view.getUint32(at + 12);
      depth = body[8];
      color = body[9];
      if (body[12] !== 0) throw new Error("interlaced PNG not supported");
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
    at += 12 + len;
  }

  const channels = color === 0 ? 1 : color === 2 ? 3 : color === 6 ? 4 : 0;
  if (!channels || (depth !== 8 && depth !== 16) ||
      (depth === 16 && channels !== 1)) {
    throw new Error(`unsupported PNG layout: depth ${depth} color ${color}`);
  }

  let zipped: Uint8Array;
  if (idat.length === 1) {
    zipped = idat[0];
  } else {
    let n = 0;
    for (const part of idat) n += part.length;
    zipped = new Uint8Array(n);
    let o = 0;
    for (const part of idat) {
      zipped.set(part, o);
      o += part.length;
    }
  }
  const raw = unzlibSync(zipped);

  const bytesPerPx = channels * (depth === 16 ? 2 : 1);
  const stride = width * bytesPerPx;
  if (raw.length !== height * (stride + 1)) {
    throw new Error("PNG scanline data has wrong length");
  }

  // undo per-row filters in place on a copy without the filter bytes
  const flat = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = y * stride;
    const prev = row - stride;
    const src = y * (stride + 1) + 1;
    for (let x = 0; x < stride; x++) {
      const v = raw[src + x];
      const a = x >= bytesPerPx ? flat[row + x - bytesPerPx] : 0;
      const b = y > 0 ? flat[prev + x] : 0;
      const c = y > 0 && x >= bytesPerPx ? flat[prev + x - bytesPerPx] : 0;
      let out: number;
      switch (filter) {
        case 0: out = v; break;
        case 1: out = v + a; break;
        case 2: out = v + b; break;
        case 3: out = v + ((a + b) >> 1); break;
        case 4: out = v + paeth(a, b, c); break;
        default: throw new Error(`bad filter type ${filter}`);
      }
      flat[row + x] = out & 0xff;
    }
  }

  if (depth === 16) {
    const data = new Uint16Array(width * height);
    for (let i = 0; i < data.length; i++) {
      data[i] = (flat[2 * i] << 8) | flat[2 * i + 1];
    }
    return { width, height, channels: 1, data };
  }
  return { width, height, channels: channels as 1 | 3 | 4, data: flat };
}
