/* tslint:disable */
/* eslint-disable */

export class Dance {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Beat alignment after moving the music beats by `shift` frames.
     */
    beat_alignment(shift: number): number;
    fps(): number;
    frames(): number;
    /**
     * Local minima of the smoothed mean joint speed.
     */
    motion_beats(): Uint32Array;
    music_beats(): Uint32Array;
    /**
     * One corpus item at a fixed tempo.
     */
    constructor(seed: number, bpm: number, frames: number);
    /**
     * Joint positions, `frames × 24 × 3`, y up.
     */
    positions(): Float64Array;
}

/**
 * Weight of each chunk at each output frame, `frames × chunks`.
 */
export function blend_weights(chunks: number, window: number): Float64Array;

/**
 * Parent index of each joint, `-1` for the root.
 */
export function parents(): Int32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_dance_free: (a: number, b: number) => void;
    readonly blend_weights: (a: number, b: number) => [number, number, number, number];
    readonly dance_beat_alignment: (a: number, b: number) => [number, number, number];
    readonly dance_fps: (a: number) => number;
    readonly dance_frames: (a: number) => number;
    readonly dance_motion_beats: (a: number) => [number, number];
    readonly dance_music_beats: (a: number) => [number, number];
    readonly dance_new: (a: number, b: number, c: number) => [number, number, number];
    readonly dance_positions: (a: number) => [number, number];
    readonly parents: () => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
